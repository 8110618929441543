//! Measurements shared by the acceptance suite.

use ppn_core::data::{Dataset, PatientRecord};
use ppn_core::memory::PrototypeMemory;
use ppn_core::model::PpnModel;

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Per-indicator mean of the observed raw values of each patient; `NaN`
/// where an indicator was never observed.
pub fn indicator_means(ds: &Dataset) -> Vec<Vec<f64>> {
    ds.records
        .iter()
        .map(|r| {
            (0..r.n_indicators())
                .map(|n| {
                    let obs: Vec<f64> = (0..r.n_visits()).filter_map(|t| r.value(t, n)).collect();
                    if obs.is_empty() {
                        f64::NAN
                    } else {
                        obs.iter().sum::<f64>() / obs.len() as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Smallest Euclidean distance between two prototypes.
pub fn min_prototype_distance(m: &PpnModel) -> f64 {
    let p = PrototypeMemory::prototypes(&m.params).expect("model has prototypes");
    let mut best = f64::INFINITY;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            best = best.min(distance(&p[i], &p[j]));
        }
    }
    best
}

/// Median pairwise distance between the embeddings of the first `n`
/// patients of `ds`.
pub fn embedding_scale(m: &PpnModel, ds: &Dataset, n: usize) -> ppn_core::Result<f64> {
    let recs: Vec<PatientRecord> = ds.records.iter().take(n).map(|r| m.normalize(r)).collect::<ppn_core::Result<_>>()?;
    let emb = m.embed(&recs)?;
    let mut d = Vec::new();
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            d.push(distance(&emb[i], &emb[j]));
        }
    }
    Ok(median(&d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
