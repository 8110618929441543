//! Patient records, datasets, preprocessing and the synthetic generator.

mod io;
mod masking;
mod record;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PpnError, Result};

pub use io::{load_dataset, save_dataset, DataFormat, WireRecord, WireVisit, DATA_FORMAT_TAG};
pub use masking::{mask_observation_rate, mask_visit_rate};
pub use record::{PatientRecord, MISSING};
pub use synth::{default_subtypes, generate_synthetic, SubtypeSpec, SynthConfig};

/// Per-column mean and standard deviation, fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub indicator_mean: Vec<f64>,
    pub indicator_std: Vec<f64>,
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        sum += v;
        sq += v * v;
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    // constant (or near-constant) columns divide by one
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl NormStats {
    /// Fits on observed cells only. Constant columns get `std = 1`.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.stats.is_some() {
            return Err(PpnError::Contract("statistics must be fitted on raw data".into()));
        }
        let (n, m) = (train.n_indicators(), train.n_statics());
        let mut stats = NormStats {
            indicator_mean: Vec::with_capacity(n),
            indicator_std: Vec::with_capacity(n),
            static_mean: Vec::with_capacity(m),
            static_std: Vec::with_capacity(m),
        };
        for ind in 0..n {
            let (mu, sd) = mean_std(train.records.iter().flat_map(|r| {
                (0..r.n_visits()).filter_map(move |t| r.value(t, ind))
            }));
            stats.indicator_mean.push(mu);
            stats.indicator_std.push(sd);
        }
        for j in 0..m {
            let (mu, sd) = mean_std(train.records.iter().map(|r| r.statics[j]));
            stats.static_mean.push(mu);
            stats.static_std.push(sd);
        }
        Ok(stats)
    }

    pub fn n_indicators(&self) -> usize {
        self.indicator_mean.len()
    }

    pub fn n_statics(&self) -> usize {
        self.static_mean.len()
    }

    /// Normalizes and imputes one raw record.
    pub fn apply(&self, record: &PatientRecord) -> Result<PatientRecord> {
        if record.n_indicators() != self.n_indicators() || record.n_statics() != self.n_statics() {
            return Err(PpnError::Contract(format!(
                "record {} has {} indicators / {} statics, statistics expect {} / {}",
                record.id,
                record.n_indicators(),
                record.n_statics(),
                self.n_indicators(),
                self.n_statics()
            )));
        }
        Ok(record.normalized(self))
    }
}

/// A set of patients sharing the same indicator and static columns.
///
/// `stats` is `Some` once the dataset has been normalized and imputed, and
/// then records the training statistics that were applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<PatientRecord>,
    pub indicator_names: Vec<String>,
    pub static_names: Vec<String>,
    pub stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(
        records: Vec<PatientRecord>,
        indicator_names: Vec<String>,
        static_names: Vec<String>,
    ) -> Result<Self> {
        let (n, m) = (indicator_names.len(), static_names.len());
        for r in &records {
            if r.n_indicators() != n {
                return Err(PpnError::ingest(
                    &r.id,
                    format!("{} indicators, dataset declares {n}", r.n_indicators()),
                ));
            }
            if r.n_statics() != m {
                return Err(PpnError::ingest(
                    &r.id,
                    format!("{} static values, dataset declares {m}", r.n_statics()),
                ));
            }
        }
        Ok(Self {
            records,
            indicator_names,
            static_names,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_indicators(&self) -> usize {
        self.indicator_names.len()
    }

    pub fn n_statics(&self) -> usize {
        self.static_names.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.stats.is_some()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| r.label == 1).count()
    }

    pub fn get(&self, id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub(crate) fn with_records(&self, records: Vec<PatientRecord>) -> Self {
        Self {
            records,
            indicator_names: self.indicator_names.clone(),
            static_names: self.static_names.clone(),
            stats: self.stats.clone(),
        }
    }

    pub(crate) fn require_raw(&self, op: &str) -> Result<()> {
        if self.is_normalized() {
            return Err(PpnError::Contract(format!("{op} expects a raw (unnormalized) dataset")));
        }
        Ok(())
    }
}

/// Z-scores observed values with `stats` and imputes unobserved cells by
/// last observation carried forward, falling back to the training mean.
/// Observed entries and the mask are never altered beyond the z-score.
pub fn normalize_and_impute(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    ds.require_raw("normalize_and_impute")?;
    let records = ds.records.iter().map(|r| stats.apply(r)).collect::<Result<_>>()?;
    let mut out = ds.with_records(records);
    out.stats = Some(stats.clone());
    Ok(out)
}

/// Stratified, seed-deterministic `(train, val, test)` partition.
///
/// Split sizes are `round(n * fraction)` for validation and test with the
/// remainder going to training; within each split the positive count is
/// rounded from the global rate, so it is within one record of it.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(PpnError::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n = ds.len();
    let n_val = (n as f64 * fractions[1]).round() as usize;
    let n_test = (n as f64 * fractions[2]).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(PpnError::Config(format!(
            "split of {n} records into {n_train}/{n_val}/{n_test} leaves an empty part"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..n).filter(|&i| ds.records[i].label == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| ds.records[i].label == 0).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let rate = pos.len() as f64 / n as f64;
    let pos_val = ((n_val as f64 * rate).round() as usize).min(pos.len()).min(n_val);
    let pos_test = ((n_test as f64 * rate).round() as usize)
        .min(pos.len() - pos_val)
        .min(n_test);
    let neg_val = n_val - pos_val;
    let neg_test = n_test - pos_test;
    if neg_val + neg_test > neg.len() {
        return Err(PpnError::Config("not enough negatives to stratify".into()));
    }

    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    for (i, &idx) in pos.iter().enumerate() {
        let p = if i < pos_val { 1 } else if i < pos_val + pos_test { 2 } else { 0 };
        parts[p].push(idx);
    }
    for (i, &idx) in neg.iter().enumerate() {
        let p = if i < neg_val { 1 } else if i < neg_val + neg_test { 2 } else { 0 };
        parts[p].push(idx);
    }
    let [train, val, test] = parts.map(|mut idx| {
        idx.sort_unstable();
        ds.with_records(idx.into_iter().map(|i| ds.records[i].clone()).collect())
    });
    Ok((train, val, test))
}
