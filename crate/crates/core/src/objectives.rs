//! Classification loss, the two prototype separation losses and their sum.

use ppn_autodiff::{Array, Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PpnError, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before every log.
pub const EPS: f64 = 1e-7;

/// `70 / sqrt(K)`.
pub fn default_margin(k: usize) -> f64 {
    70.0 / (k as f64).sqrt()
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_c: f64,
    pub l_p: f64,
    pub l_d: f64,
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub margin: f64,
    pub total: f64,
}

fn clamped(g: &mut Graph, p: Var) -> Result<(Var, Var)> {
    let p = g.clamp(p, EPS, 1.0 - EPS)?;
    let (r, c) = g.value(p).shape();
    let one = g.constant(Array::ones(r, c));
    let q = g.sub(one, p)?;
    Ok((p, q))
}

/// Mean binary cross-entropy of `risk` (B x 1) against `labels`.
pub fn bce_loss(g: &mut Graph, risk: Var, labels: &[u8]) -> Result<Var> {
    let (b, c) = g.value(risk).shape();
    if c != 1 || b != labels.len() || b == 0 {
        return Err(PpnError::Contract(format!("{b} x {c} risks for {} labels", labels.len())));
    }
    let (p, q) = clamped(g, risk)?;
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let y_not: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let y = g.constant(Array::column_vector(y)?);
    let y_not = g.constant(Array::column_vector(y_not)?);
    let lp = g.ln(p)?;
    let lq = g.ln(q)?;
    let a = g.mul(y, lp)?;
    let b2 = g.mul(y_not, lq)?;
    let ll = g.add(a, b2)?;
    let m = g.mean(ll)?;
    Ok(g.scale(m, -1.0)?)
}

/// `sum over ordered pairs j != j' of y_j ln y_j' + (1 - y_j) ln(1 - y_j')`
/// for the prototype risks `y` (K x 1).
pub fn separation_loss_p(g: &mut Graph, risks: Var) -> Result<Var> {
    let (k, c) = g.value(risks).shape();
    if c != 1 || k < 2 {
        return Err(PpnError::Contract(format!("separation loss needs K >= 2 risks, got {k} x {c}")));
    }
    let (p, q) = clamped(g, risks)?;
    let lp = g.ln(p)?;
    let lq = g.ln(q)?;
    let lpt = g.transpose(lp)?;
    let lqt = g.transpose(lq)?;
    let a = g.matmul(p, lpt)?;
    let b = g.matmul(q, lqt)?;
    let all = g.add(a, b)?;
    let all = g.sum(all)?;
    // remove the j = j' terms
    let dp = g.mul(p, lp)?;
    let dq = g.mul(q, lq)?;
    let diag = g.add(dp, dq)?;
    let diag = g.sum(diag)?;
    Ok(g.sub(all, diag)?)
}

/// `sum over ordered pairs j != j' of max(0, margin - |p_j - p_j'|)` for the
/// prototype rows of `prototypes` (K x D).
pub fn separation_loss_d(g: &mut Graph, prototypes: Var, margin: f64) -> Result<Var> {
    if !(margin > 0.0) {
        return Err(PpnError::Config(format!("margin {margin} must be positive")));
    }
    let k = g.value(prototypes).rows();
    let m = g.constant(Array::scalar(margin)?);
    let mut terms = Vec::new();
    for j in 0..k {
        let pj = g.slice_rows(prototypes, j..j + 1)?;
        for jj in j + 1..k {
            let pk = g.slice_rows(prototypes, jj..jj + 1)?;
            let diff = g.sub(pj, pk)?;
            let dist = g.row_norms(diff)?;
            let gap = g.sub(m, dist)?;
            terms.push(g.hinge(gap)?);
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Array::scalar(0.0)?));
    }
    let all = g.concat_rows(&terms)?;
    let s = g.sum(all)?;
    // each unordered pair counts once per order
    Ok(g.scale(s, 2.0)?)
}

/// `L_c + lambda_p L_p + lambda_d L_d`. Terms with a zero weight are left out
/// of the graph, so the total equals `L_c` exactly in that case.
pub fn total_loss(
    g: &mut Graph,
    l_c: Var,
    l_p: Var,
    l_d: Var,
    lambda_p: f64,
    lambda_d: f64,
    margin: f64,
) -> Result<(Var, LossBundle)> {
    if lambda_p < 0.0 || lambda_d < 0.0 {
        return Err(PpnError::Config("loss weights must be nonnegative".into()));
    }
    let mut total = l_c;
    if lambda_p != 0.0 {
        let t = g.scale(l_p, lambda_p)?;
        total = g.add(total, t)?;
    }
    if lambda_d != 0.0 {
        let t = g.scale(l_d, lambda_d)?;
        total = g.add(total, t)?;
    }
    let item = |v: Var| g.value(v).as_slice()[0];
    let bundle = LossBundle {
        l_c: item(l_c),
        l_p: item(l_p),
        l_d: item(l_d),
        lambda_p,
        lambda_d,
        margin,
        total: item(total),
    };
    Ok((total, bundle))
}
