//! Synthetic EHR cohorts with planted subtypes.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatientRecord};
use crate::error::{PpnError, Result};

/// Generative parameters of one latent patient subtype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtypeSpec {
    pub id: usize,
    pub baseline: Vec<f64>,
    /// Per-visit linear trend added to the baseline.
    pub slope: Vec<f64>,
    /// Standard deviation of the AR(1) innovations.
    pub noise: f64,
    pub outcome_prob: f64,
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub ar_coefficient: f64,
    /// Probability that a single cell is measured.
    pub observation_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            t_min: 4,
            t_max: 30,
            ar_coefficient: 0.5,
            observation_prob: 0.8,
            seed: 0,
        }
    }
}

/// Four subtypes over 8 indicators and 4 statics.
///
/// Indicators 0-3 carry a level (+1 or -1) and indicators 4-7 a falling or
/// rising course. The outcome depends on the combination, so the subtypes
/// cannot be told apart from per-indicator averages alone.
pub fn default_subtypes() -> Vec<SubtypeSpec> {
    let level = [1.0, -1.0, -1.0, 1.0];
    let rising = [false, false, true, true];
    let outcome = [0.05, 0.2, 0.5, 0.8];
    let age = [52.0, 58.0, 63.0, 70.0];
    let offsets = [[0.0, 0.2, -0.2], [0.2, -0.2, 0.0], [-0.2, 0.0, 0.2], [0.0, 0.0, 0.0]];
    (0..4)
        .map(|g| {
            let (base, slope) = if rising[g] { (-2.0, 0.2) } else { (2.0, -0.2) };
            let mut baseline = vec![level[g]; 4];
            baseline.extend([base; 4]);
            let mut slopes = vec![0.0; 4];
            slopes.extend([slope; 4]);
            let mut static_mean = vec![age[g]];
            static_mean.extend(offsets[g]);
            SubtypeSpec {
                id: g,
                baseline,
                slope: slopes,
                noise: 0.5,
                outcome_prob: outcome[g],
                static_mean,
                static_std: vec![12.0, 1.0, 1.0, 1.0],
            }
        })
        .collect()
}

fn validate(specs: &[SubtypeSpec], cfg: &SynthConfig) -> Result<(usize, usize)> {
    if specs.len() < 2 {
        return Err(PpnError::Config("at least two subtypes are required".into()));
    }
    if cfg.t_min == 0 || cfg.t_min > cfg.t_max {
        return Err(PpnError::Config(format!("invalid visit range {}..={}", cfg.t_min, cfg.t_max)));
    }
    if cfg.n_patients == 0 {
        return Err(PpnError::Config("n_patients must be positive".into()));
    }
    if !(cfg.observation_prob > 0.0 && cfg.observation_prob <= 1.0) {
        return Err(PpnError::Config(format!("observation_prob {} outside (0, 1]", cfg.observation_prob)));
    }
    if !(cfg.ar_coefficient.abs() < 1.0) {
        return Err(PpnError::Config(format!("ar_coefficient {} must be in (-1, 1)", cfg.ar_coefficient)));
    }
    let n = specs[0].baseline.len();
    let m = specs[0].static_mean.len();
    for s in specs {
        if !(0.0..=1.0).contains(&s.outcome_prob) {
            return Err(PpnError::Config(format!("subtype {}: outcome probability {} outside [0, 1]", s.id, s.outcome_prob)));
        }
        if s.baseline.len() != n || s.slope.len() != n || s.static_mean.len() != m || s.static_std.len() != m {
            return Err(PpnError::Config(format!("subtype {}: dimensions differ from subtype {}", s.id, specs[0].id)));
        }
        if n == 0 {
            return Err(PpnError::Config("subtypes need at least one indicator".into()));
        }
        if s.noise < 0.0 || s.static_std.iter().any(|&v| v < 0.0) {
            return Err(PpnError::Config(format!("subtype {}: negative scale", s.id)));
        }
    }
    Ok((n, m))
}

/// Draws `cfg.n_patients` patients, each from a uniformly chosen subtype.
///
/// Values follow `baseline + slope * t + e_t` with AR(1) noise
/// `e_t = phi * e_{t-1} + noise * eps_t`. Patient ids are `p00000`,
/// `p00001`, ... so lexicographic order is generation order.
pub fn generate_synthetic(specs: &[SubtypeSpec], cfg: &SynthConfig) -> Result<Dataset> {
    let (n, m) = validate(specs, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let spec = &specs[rng.random_range(0..specs.len())];
        let t_len = rng.random_range(cfg.t_min..=cfg.t_max);
        let mut noise = vec![0.0; n];
        let mut visits = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let row = (0..n)
                .map(|k| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    noise[k] = cfg.ar_coefficient * noise[k] + spec.noise * eps;
                    let value = spec.baseline[k] + spec.slope[k] * t as f64 + noise[k];
                    rng.random_bool(cfg.observation_prob).then_some(value)
                })
                .collect();
            visits.push(row);
        }
        let statics = (0..m)
            .map(|j| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                spec.static_mean[j] + spec.static_std[j] * eps
            })
            .collect();
        let label = u8::from(rng.random_bool(spec.outcome_prob));
        records.push(PatientRecord::from_visits(format!("p{i:05}"), &visits, statics, label)?.with_subtype(spec.id));
    }
    Dataset::new(
        records,
        (0..n).map(|k| format!("x{k}")).collect(),
        (0..m).map(|j| format!("static_{j}")).collect(),
    )
}
