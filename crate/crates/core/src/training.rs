//! Training schedule, evaluation and the sparsity experiments.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ppn_autodiff::{Adam, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mask_observation_rate, mask_visit_rate, Dataset, NormStats, PatientRecord};
use crate::encoder::{StaticActivation, ENCODER_PREFIX};
use crate::error::{PpnError, Result};
use crate::integration::{HeadKind, SimilarityTransform, W_H};
use crate::memory::{KMeansConfig, PROTOTYPES};
use crate::metrics::{auprc, auroc};
use crate::model::{ModelConfig, PpnModel};
use crate::objectives::{bce_loss, default_margin, separation_loss_d, separation_loss_p, total_loss, LossBundle};

pub const CONFIG_TAG: &str = "ppn-config-v1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// No progressive re-selection after initialization.
    #[serde(rename = "r-")]
    NoRefresh,
    /// Separation losses switched off.
    #[serde(rename = "s-")]
    NoSeparation,
    /// Risk predicted from the similarity vector alone.
    #[serde(rename = "a-")]
    SimilarityHead,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoRefresh => "r-",
            Self::NoSeparation => "s-",
            Self::SimilarityHead => "a-",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = PpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "r-" => Ok(Self::NoRefresh),
            "s-" => Ok(Self::NoSeparation),
            "a-" => Ok(Self::SimilarityHead),
            other => Err(PpnError::Config(format!("unknown ablation `{other}` (full, r-, s-, a-)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub hidden: usize,
    pub lambda_p: f64,
    pub lambda_d: f64,
    /// Defaults to `70 / sqrt(K)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    pub refresh_epochs: Vec<usize>,
    /// Epochs the encoder and prototypes stay frozen after a refresh.
    pub freeze_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub static_activation: StaticActivation,
    pub similarity: SimilarityTransform,
    /// Treat prototype risks as constants inside the separation loss.
    pub detach_prototype_risks: bool,
    /// Also freeze `W_h` during the post-refresh window.
    pub freeze_integration_weights: bool,
    pub kmeans_batch_size: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 4,
            hidden: 32,
            lambda_p: 0.1,
            lambda_d: 0.05,
            margin: None,
            refresh_epochs: vec![10, 30, 50],
            freeze_epochs: 2,
            epochs: 60,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            ablation: Ablation::Full,
            static_activation: StaticActivation::Tanh,
            similarity: SimilarityTransform::Raw,
            detach_prototype_risks: false,
            freeze_integration_weights: false,
            kmeans_batch_size: 256,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PpnError::Config(m));
        if self.k < 2 {
            return bad(format!("k = {} must be at least 2", self.k));
        }
        if self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lambda_p >= 0.0 && self.lambda_d >= 0.0) {
            return bad("lambda_p and lambda_d must be nonnegative".into());
        }
        if let Some(m) = self.margin {
            if !(m > 0.0) || !m.is_finite() {
                return bad(format!("margin {m} must be positive"));
            }
        }
        if let Some(&max) = self.refresh_epochs.iter().max() {
            if max >= self.epochs {
                return bad(format!("refresh epoch {max} must be below epochs = {}", self.epochs));
            }
        }
        if self.refresh_epochs.contains(&0) {
            return bad("refresh epochs are numbered from 1".into());
        }
        if self.kmeans_batch_size == 0 || self.kmeans_tol < 0.0 {
            return bad("invalid k-means settings".into());
        }
        Ok(())
    }

    pub fn margin(&self) -> f64 {
        self.margin.unwrap_or_else(|| default_margin(self.k))
    }

    /// Loss weights after applying the ablation mode.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        match self.ablation {
            Ablation::NoSeparation => (0.0, 0.0),
            _ => (self.lambda_p, self.lambda_d),
        }
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            batch_size: self.kmeans_batch_size,
            max_iters: self.kmeans_max_iters,
            tol: self.kmeans_tol,
        }
    }

    pub fn model_config(&self, n_indicators: usize, n_statics: usize) -> ModelConfig {
        ModelConfig {
            n_indicators,
            n_statics,
            hidden: self.hidden,
            k: self.k,
            static_activation: self.static_activation,
            similarity: self.similarity,
            head: if self.ablation == Ablation::SimilarityHead {
                HeadKind::SimilarityOnly
            } else {
                HeadKind::Integrated
            },
        }
    }

    /// Parses a config document: a `# ppn-config-v1` line followed by flat
    /// `key = value` pairs. Missing keys take their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        if first.trim().trim_start_matches('#').trim() != CONFIG_TAG {
            return Err(PpnError::Config(format!("config must start with `# {CONFIG_TAG}`")));
        }
        let cfg: Self = toml::from_str(text).map_err(|e| PpnError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_document(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| PpnError::Config(e.to_string()))?;
        Ok(format!("# {CONFIG_TAG}\n{body}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_document()?)?;
        Ok(())
    }
}

/// One row of the per-epoch metrics file. Loss values are batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    #[serde(rename = "L_d")]
    pub l_d: f64,
    pub total: f64,
    pub val_auprc: f64,
    pub val_auroc: f64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub auprc: f64,
    pub auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Validation metrics of the selected checkpoint.
    pub auprc: f64,
    pub auroc: f64,
    pub best_epoch: usize,
    pub per_seed: Vec<SeedResult>,
    pub loss_curve: Vec<EpochRecord>,
}

/// Where in the schedule an observer is being called.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Init,
    Select,
    Assign,
    EpochEnd,
}

/// Snapshot handed to a training observer.
pub struct TrainEvent<'a> {
    pub epoch: usize,
    pub stage: Stage,
    pub model: &'a PpnModel,
    /// Training embeddings the memory was just projected onto (for
    /// `Init`, `Select` and `Assign`).
    pub embeddings: Option<&'a [Vec<f64>]>,
    pub ids: &'a [String],
    pub frozen: bool,
}

pub struct TrainOutcome {
    /// Best checkpoint by validation AUPRC (earliest epoch on ties).
    pub model: PpnModel,
    pub report: EvalReport,
    /// Warnings raised along the way (zero norms, shared prototypes).
    pub warnings: Vec<String>,
}

/// `(AUPRC, AUROC)` of `model` on a dataset.
pub fn evaluate(model: &PpnModel, ds: &Dataset) -> Result<(f64, f64)> {
    let preds = model.score_dataset(ds)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.risk).collect();
    let labels = ds.labels();
    Ok((auprc(&labels, &scores)?, auroc(&labels, &scores)?))
}

fn set_freeze(model: &mut PpnModel, cfg: &TrainConfig, on: bool) -> Result<()> {
    model.params.set_frozen_prefix(ENCODER_PREFIX, on);
    model.params.set_frozen(PROTOTYPES, on)?;
    if cfg.freeze_integration_weights && model.params.contains(W_H) {
        model.params.set_frozen(W_H, on)?;
    }
    model.memory.frozen = on;
    Ok(())
}

fn prepared(ds: &Dataset, stats: &NormStats) -> Result<Vec<PatientRecord>> {
    match &ds.stats {
        Some(s) if s == stats => Ok(ds.records.clone()),
        Some(_) => Err(PpnError::Contract("datasets were normalized with different statistics".into())),
        None => ds.records.iter().map(|r| stats.apply(r)).collect(),
    }
}

pub fn train(cfg: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    train_with_observer(cfg, train_set, val_set, &mut |_| Ok(()))
}

/// Runs the full schedule. Datasets may be raw, in which case statistics
/// are fitted on `train_set`, or already normalized with shared statistics.
///
/// Per epoch: optional progressive selection and freeze at refresh epochs,
/// shuffled mini-batch Adam steps on the total loss, an assign step when
/// the memory is not frozen, and validation scoring.
pub fn train_with_observer(
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    observer: &mut dyn FnMut(&TrainEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.n_indicators() != val_set.n_indicators() || train_set.n_statics() != val_set.n_statics() {
        return Err(PpnError::Contract("training and validation sets have different columns".into()));
    }
    if train_set.len() < cfg.k {
        return Err(PpnError::Config(format!("{} training patients cannot seed K = {} prototypes", train_set.len(), cfg.k)));
    }
    let stats = match &train_set.stats {
        Some(s) => s.clone(),
        None => NormStats::fit(train_set)?,
    };
    let train_recs = prepared(train_set, &stats)?;
    let val_recs = prepared(val_set, &stats)?;
    let val_refs: Vec<&PatientRecord> = val_recs.iter().collect();
    let val_labels = val_set.labels();
    let ids: Vec<String> = train_recs.iter().map(|r| r.id.clone()).collect();
    if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
        return Err(PpnError::Config("training patient ids must be unique".into()));
    }

    let mut model = PpnModel::new(
        cfg.model_config(train_set.n_indicators(), train_set.n_statics()),
        stats,
        train_set.indicator_names.clone(),
        train_set.static_names.clone(),
        cfg.seed,
    )?;
    let (lambda_p, lambda_d) = cfg.effective_lambdas();
    let margin = cfg.margin();
    let kmeans = cfg.kmeans();
    let mut warnings = Vec::new();

    let emb = model.embed(&train_recs)?;
    warnings.extend(model.memory.initialize(&mut model.params, &emb, &ids, &kmeans, cfg.seed)?);
    observer(&TrainEvent { epoch: 0, stage: Stage::Init, model: &model, embeddings: Some(&emb), ids: &ids, frozen: false })?;

    let mut adam = Adam::new(cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5A1E);
    let mut order: Vec<usize> = (0..train_recs.len()).collect();
    let mut frozen_until: Option<usize> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, PpnModel)> = None;

    for epoch in 1..=cfg.epochs {
        if cfg.refresh_epochs.contains(&epoch) && cfg.ablation != Ablation::NoRefresh {
            let emb = model.embed(&train_recs)?;
            let (_, w) = model.memory.progressive_select(
                &mut model.params,
                &emb,
                &ids,
                epoch,
                &kmeans,
                cfg.seed.wrapping_add(epoch as u64),
            )?;
            warnings.extend(w);
            if cfg.freeze_epochs > 0 {
                set_freeze(&mut model, cfg, true)?;
                frozen_until = Some(epoch + cfg.freeze_epochs - 1);
            }
            observer(&TrainEvent { epoch, stage: Stage::Select, model: &model, embeddings: Some(&emb), ids: &ids, frozen: model.memory.frozen })?;
        }
        let frozen = frozen_until.is_some_and(|u| epoch <= u);

        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let recs: Vec<&PatientRecord> = chunk.iter().map(|&i| &train_recs[i]).collect();
            let labels: Vec<u8> = recs.iter().map(|r| r.label).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true)?;
            let fwd = model.forward(&mut g, &vars, &recs)?;
            let l_c = bce_loss(&mut g, fwd.risk, &labels)?;
            let mut y = model.prototype_risk_var(&mut g, &vars)?;
            if cfg.detach_prototype_risks {
                y = g.detach(y);
            }
            let l_p = separation_loss_p(&mut g, y)?;
            let l_d = separation_loss_d(&mut g, vars.prototypes, margin)?;
            let (root, bundle) = total_loss(&mut g, l_c, l_p, l_d, lambda_p, lambda_d, margin)?;
            if !bundle.total.is_finite() {
                return Err(PpnError::Divergence { epoch, batch: bi, loss: bundle.total });
            }
            g.backward(root)?;
            g.accumulate_param_grads(&mut model.params)?;
            adam.step(&mut model.params)?;
            for (s, v) in sums.iter_mut().zip([bundle.l_c, bundle.l_p, bundle.l_d, bundle.total]) {
                *s += v;
            }
            batches += 1;
        }

        if !frozen {
            let emb = model.embed(&train_recs)?;
            warnings.extend(model.memory.assign_step(&mut model.params, &emb, &ids)?);
            observer(&TrainEvent { epoch, stage: Stage::Assign, model: &model, embeddings: Some(&emb), ids: &ids, frozen })?;
        }
        if frozen_until == Some(epoch) {
            set_freeze(&mut model, cfg, false)?;
            frozen_until = None;
        }

        let preds = model.score(&val_refs)?;
        let scores: Vec<f64> = preds.iter().map(|p| p.risk).collect();
        let (ap, roc) = (auprc(&val_labels, &scores)?, auroc(&val_labels, &scores)?);
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            l_c: sums[0] / n,
            l_p: sums[1] / n,
            l_d: sums[2] / n,
            total: sums[3] / n,
            val_auprc: ap,
            val_auroc: roc,
            frozen,
        };
        log::info!(
            "epoch {epoch:>3}  L_c {:.4}  L_p {:.4}  L_d {:.4}  total {:.4}  val AUPRC {ap:.4}  AUROC {roc:.4}{}",
            record.l_c,
            record.l_p,
            record.l_d,
            record.total,
            if frozen { "  [frozen]" } else { "" }
        );
        curve.push(record);
        if best.as_ref().is_none_or(|b| ap > b.0) {
            best = Some((ap, roc, epoch, model.clone()));
        }
        observer(&TrainEvent { epoch, stage: Stage::EpochEnd, model: &model, embeddings: None, ids: &ids, frozen })?;
    }

    let (ap, roc, best_epoch, mut model) = best.expect("at least one epoch");
    set_freeze(&mut model, cfg, false)?;
    Ok(TrainOutcome {
        model,
        report: EvalReport {
            auprc: ap,
            auroc: roc,
            best_epoch,
            per_seed: vec![SeedResult { seed: cfg.seed, auprc: ap, auroc: roc }],
            loss_curve: curve,
        },
        warnings,
    })
}

/// Loss values of one pass over `ds`, without updating anything.
pub fn loss_on(model: &PpnModel, cfg: &TrainConfig, ds: &Dataset) -> Result<LossBundle> {
    let recs = model.prepare(ds)?;
    let refs: Vec<&PatientRecord> = recs.iter().collect();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true)?;
    let fwd = model.forward(&mut g, &vars, &refs)?;
    let l_c = bce_loss(&mut g, fwd.risk, &ds.labels())?;
    let y = model.prototype_risk_var(&mut g, &vars)?;
    let l_p = separation_loss_p(&mut g, y)?;
    let l_d = separation_loss_d(&mut g, vars.prototypes, cfg.margin())?;
    let (lp, ld) = cfg.effective_lambdas();
    Ok(total_loss(&mut g, l_c, l_p, l_d, lp, ld, cfg.margin())?.1)
}

pub fn write_metrics_csv(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAxis {
    Visit,
    Observation,
}

impl FromStr for MaskAxis {
    type Err = PpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visit" => Ok(Self::Visit),
            "observation" => Ok(Self::Observation),
            other => Err(PpnError::Config(format!("unknown axis `{other}` (visit, observation)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessRow {
    pub rate: f64,
    pub mean_auprc: f64,
    pub std_auprc: f64,
    #[serde(skip)]
    pub per_seed: Vec<f64>,
}

/// Test AUPRC after thinning the raw `test` set at each rate, per seed.
pub fn run_missingness_experiment(
    model: &PpnModel,
    test: &Dataset,
    rates: &[f64],
    axis: MaskAxis,
    seeds: &[u64],
) -> Result<Vec<MissingnessRow>> {
    if seeds.is_empty() {
        return Err(PpnError::Config("at least one seed is required".into()));
    }
    rates
        .iter()
        .map(|&rate| {
            let per_seed = seeds
                .iter()
                .map(|&seed| {
                    let masked = match axis {
                        MaskAxis::Visit => mask_visit_rate(test, rate, seed)?,
                        MaskAxis::Observation => mask_observation_rate(test, rate, seed)?,
                    };
                    Ok(evaluate(model, &masked)?.0)
                })
                .collect::<Result<Vec<f64>>>()?;
            let n = per_seed.len() as f64;
            let mean = per_seed.iter().sum::<f64>() / n;
            let var = if per_seed.len() > 1 {
                per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Ok(MissingnessRow { rate, mean_auprc: mean, std_auprc: var.sqrt(), per_seed })
        })
        .collect()
}

pub fn write_experiment_csv(path: &Path, rows: &[MissingnessRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
