//! Ranking metrics for binary outcomes.

use std::cmp::Ordering;

use crate::error::{PpnError, Result};

fn check(labels: &[u8], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(PpnError::Contract(format!("{} labels but {} scores", labels.len(), scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PpnError::Contract("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney U over average ranks).
pub fn auroc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check(labels, scores)?;
    if pos == 0 || neg == 0 {
        return Err(PpnError::UndefinedMetric("AUROC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: `sum_n (R_n - R_{n-1}) P_n` over descending score
/// thresholds, each group of tied scores forming a single threshold.
pub fn auprc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    let (pos, _) = check(labels, scores)?;
    if pos == 0 {
        return Err(PpnError::UndefinedMetric("AUPRC needs at least one positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[1, 0], &[0.9, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[1, 0, 1, 0], &[0.8, 0.7, 0.6, 0.5]).unwrap(), 0.75);
        assert_eq!(auroc(&[1, 0, 0, 1], &[0.3; 4]).unwrap(), 0.5);
        assert!(matches!(auroc(&[1, 1], &[0.2, 0.3]), Err(PpnError::UndefinedMetric(_))));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[1, 1, 0], &[0.9, 0.8, 0.1]).unwrap(), 1.0);
        assert_eq!(auprc(&[1, 0], &[0.1, 0.9]).unwrap(), 0.5);
        // one tie group holding everything: precision = prevalence
        assert_eq!(auprc(&[1, 0, 0, 0], &[0.5; 4]).unwrap(), 0.25);
        assert!(matches!(auprc(&[0, 0], &[0.2, 0.3]), Err(PpnError::UndefinedMetric(_))));
        assert!(auprc(&[1], &[0.1, 0.2]).is_err());
    }
}
