//! Sparsity maskers for the visit-rate and observation-rate experiments.
//! Both operate on raw datasets; normalize afterwards.

use rand::seq::index::sample;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{PpnError, Result};

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(PpnError::Config(format!("rate {rate} outside (0, 1]")))
    }
}

/// Number of visits kept out of `t` at `rate`: `ceil(rate * t)`, at least one.
pub fn kept_visits(t: usize, rate: f64) -> usize {
    // the epsilon keeps 0.1 * 30 from rounding up to 4
    ((rate * t as f64 - 1e-9).ceil() as usize).clamp(1, t)
}

/// Keeps a uniformly sampled subset of each patient's visits, in time order.
pub fn mask_visit_rate(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    ds.require_raw("mask_visit_rate")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = ds
        .records
        .iter()
        .map(|r| {
            let t = r.n_visits();
            let keep = kept_visits(t, rate);
            if keep == t {
                return r.clone();
            }
            let mut idx = sample(&mut rng, t, keep).into_vec();
            idx.sort_unstable();
            r.select_visits(&idx)
        })
        .collect();
    Ok(ds.with_records(records))
}

/// Retains each observed cell independently with probability `rate`.
pub fn mask_observation_rate(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    ds.require_raw("mask_observation_rate")?;
    if rate == 1.0 {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = ds
        .records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            for t in 0..r.n_visits() {
                for n in 0..r.n_indicators() {
                    if r.observed(t, n) && !rng.random_bool(rate) {
                        out.unobserve(t, n);
                    }
                }
            }
            out
        })
        .collect();
    Ok(ds.with_records(records))
}
