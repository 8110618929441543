#![allow(dead_code)]

use ppn_autodiff::{Graph, Var};
use ppn_core::data::{NormStats, PatientRecord};
use ppn_core::encoder::StaticActivation;
use ppn_core::integration::{HeadKind, SimilarityTransform};
use ppn_core::model::{ModelConfig, PpnModel};
use ppn_core::objectives::{bce_loss, separation_loss_d, separation_loss_p, total_loss};
use ppn_core::Result;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config(n: usize, m: usize, h: usize, k: usize, head: HeadKind) -> ModelConfig {
    ModelConfig {
        n_indicators: n,
        n_statics: m,
        hidden: h,
        k,
        static_activation: StaticActivation::Tanh,
        similarity: SimilarityTransform::Raw,
        head,
    }
}

pub fn identity_stats(n: usize, m: usize) -> NormStats {
    NormStats {
        indicator_mean: vec![0.0; n],
        indicator_std: vec![1.0; n],
        static_mean: vec![0.0; m],
        static_std: vec![1.0; m],
    }
}

pub fn model(cfg: ModelConfig, seed: u64) -> PpnModel {
    let names = |p: &str, c: usize| (0..c).map(|i| format!("{p}{i}")).collect();
    let mut m = PpnModel::new(
        cfg,
        identity_stats(cfg.n_indicators, cfg.n_statics),
        names("x", cfg.n_indicators),
        names("s", cfg.n_statics),
        seed,
    )
    .unwrap();
    m.memory.source_ids = (0..cfg.k).map(|j| format!("src{j}")).collect();
    m
}

/// Random raw record with roughly `obs` of its cells observed (the first
/// visit always fully observed).
pub fn random_record(rng: &mut ChaCha8Rng, id: &str, n: usize, m: usize, t: usize, obs: f64) -> PatientRecord {
    let visits: Vec<Vec<Option<f64>>> = (0..t)
        .map(|ti| {
            (0..n)
                .map(|_| (ti == 0 || rng.random_bool(obs)).then(|| rng.random_range(-2.0..2.0)))
                .collect()
        })
        .collect();
    let statics = (0..m).map(|_| rng.random_range(-1.5..1.5)).collect();
    PatientRecord::from_visits(id, &visits, statics, rng.random_range(0..2u8)).unwrap()
}

pub fn random_records(seed: u64, count: usize, n: usize, m: usize, t: std::ops::RangeInclusive<usize>) -> Vec<PatientRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let len = rng.random_range(t.clone());
            random_record(&mut rng, &format!("r{i}"), n, m, len, 0.7)
        })
        .collect()
}

/// Full objective on `records` (already normalized) with the model's
/// parameters replaced by `params`.
pub fn full_loss(
    g: &mut Graph,
    model: &PpnModel,
    params: &ppn_autodiff::ParameterSet,
    records: &[PatientRecord],
    lambdas: (f64, f64),
    margin: f64,
) -> Result<Var> {
    let mut m = model.clone();
    m.params = params.clone();
    let vars = m.bind(g, false)?;
    let refs: Vec<&PatientRecord> = records.iter().collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let fwd = m.forward(g, &vars, &refs)?;
    let l_c = bce_loss(g, fwd.risk, &labels)?;
    let y = m.prototype_risk_var(g, &vars)?;
    let l_p = separation_loss_p(g, y)?;
    let l_d = separation_loss_d(g, vars.prototypes, margin)?;
    Ok(total_loss(g, l_c, l_p, l_d, lambdas.0, lambdas.1, margin)?.0)
}
pub mod oracles;
