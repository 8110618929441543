//! Prototype similarity, similarity-weighted fusion of the health status and
//! the sigmoid risk head.

use ppn_autodiff::{Array, Graph, ParameterSet, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{bind, uniform};
use crate::error::{PpnError, Result};

/// Norms below this make a similarity undefined; it is reported as 0.
pub const NORM_GUARD: f64 = 1e-12;

pub const W_H: &str = "integration.w_h";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
pub const SIM_WEIGHT: &str = "head.sim_weight";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityTransform {
    /// Cosine coefficients as computed.
    #[default]
    Raw,
    /// Negative coefficients clipped to zero before fusion.
    Relu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `sigmoid(w . h_p + b)` on the fused health status.
    #[default]
    Integrated,
    /// `sigmoid(u . s + b)` on the similarity vector alone.
    SimilarityOnly,
}

/// The K cosine coefficients between one patient and the prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVector(pub Vec<f64>);

impl SimilarityVector {
    /// Index of the largest coefficient; the lowest index wins ties.
    pub fn nearest(&self) -> usize {
        let mut best = 0;
        for (j, &s) in self.0.iter().enumerate() {
            if s > self.0[best] {
                best = j;
            }
        }
        best
    }
}

/// Fused representation of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegratedStatus {
    /// `W_h^T h`, K x H.
    pub h_prime: Array,
    /// `h'^T s`, 1 x H.
    pub h_p: Array,
}

/// Shape and parameter locations of the integration weights and head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationParams {
    pub n_indicators: usize,
    pub hidden: usize,
    pub k: usize,
    pub head: HeadKind,
    pub similarity: SimilarityTransform,
}

#[derive(Clone, Copy, Debug)]
pub struct IntegrationVars {
    pub w_h: Option<Var>,
    pub head_weight: Option<Var>,
    pub sim_weight: Option<Var>,
    pub bias: Var,
    pub shape: IntegrationParams,
}

impl IntegrationParams {
    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) -> Result<()> {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        match self.head {
            HeadKind::Integrated => {
                params.insert(W_H, uniform(rng, self.n_indicators + 1, self.k, bound))?;
                params.insert(HEAD_WEIGHT, uniform(rng, self.hidden, 1, bound))?;
            }
            HeadKind::SimilarityOnly => {
                params.insert(SIM_WEIGHT, uniform(rng, self.k, 1, bound))?;
            }
        }
        params.insert(HEAD_BIAS, uniform(rng, 1, 1, bound))?;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, params: &ParameterSet, frozen_as_constants: bool) -> Result<IntegrationVars> {
        let mut vars = IntegrationVars {
            w_h: None,
            head_weight: None,
            sim_weight: None,
            bias: bind(g, params, HEAD_BIAS, frozen_as_constants)?,
            shape: *self,
        };
        match self.head {
            HeadKind::Integrated => {
                vars.w_h = Some(bind(g, params, W_H, frozen_as_constants)?);
                vars.head_weight = Some(bind(g, params, HEAD_WEIGHT, frozen_as_constants)?);
            }
            HeadKind::SimilarityOnly => vars.sim_weight = Some(bind(g, params, SIM_WEIGHT, frozen_as_constants)?),
        }
        Ok(vars)
    }
}

/// Cosine similarity between each row of `flat` (B x D) and each row of
/// `prototypes` (K x D), as a B x K matrix. Pairs where either norm is below
/// [`NORM_GUARD`] get similarity exactly 0; the number of such pairs is
/// returned alongside.
pub fn cosine_similarities(g: &mut Graph, flat: Var, prototypes: Var) -> Result<(Var, usize)> {
    let (b, d) = g.value(flat).shape();
    let (k, dp) = g.value(prototypes).shape();
    if d != dp {
        return Err(PpnError::Contract(format!("health status has {d} entries, prototypes {dp}")));
    }
    let pt = g.transpose(prototypes)?;
    let dots = g.matmul(flat, pt)?;
    let nh = g.row_norms(flat)?;
    let np = g.row_norms(prototypes)?;
    let npt = g.transpose(np)?;
    let denom = g.matmul(nh, npt)?;

    let (vh, vp) = (g.value(nh).as_slice().to_vec(), g.value(np).as_slice().to_vec());
    let mut guard = Vec::with_capacity(b * k);
    let mut fired = 0;
    for &x in &vh {
        for &y in &vp {
            let ok = x >= NORM_GUARD && y >= NORM_GUARD;
            fired += usize::from(!ok);
            guard.push(if ok { 1.0 } else { 0.0 });
        }
    }
    if fired == 0 {
        return Ok((g.div(dots, denom)?, 0));
    }
    log::warn!("{fired} similarity pair(s) involve a zero-norm vector; reported as 0");
    let keep = g.constant(Array::new(b, k, guard.clone())?);
    let fill = g.constant(Array::new(b, k, guard.iter().map(|x| 1.0 - x).collect())?);
    let num = g.mul(dots, keep)?;
    let den = g.add(denom, fill)?;
    Ok((g.div(num, den)?, fired))
}

/// Applies the configured similarity transform.
pub fn transform(g: &mut Graph, sims: Var, how: SimilarityTransform) -> Result<Var> {
    Ok(match how {
        SimilarityTransform::Raw => sims,
        SimilarityTransform::Relu => g.hinge(sims)?,
    })
}

/// Fuses each row of `flat` with its similarity row: `h' = W_h^T h` and
/// `h_p = h'^T s`, returning the B x H matrix of `h_p` rows.
pub fn integrate_batch(g: &mut Graph, vars: &IntegrationVars, flat: Var, sims: Var) -> Result<Var> {
    let shape = vars.shape;
    let w_h = vars.w_h.ok_or_else(|| PpnError::Contract("the similarity-only head has no W_h".into()))?;
    let (b, d) = g.value(flat).shape();
    if d != (shape.n_indicators + 1) * shape.hidden || g.value(sims).shape() != (b, shape.k) {
        return Err(PpnError::Contract(format!(
            "integration expects B x {} status and B x {} similarities",
            (shape.n_indicators + 1) * shape.hidden,
            shape.k
        )));
    }
    let wt = g.transpose(w_h)?;
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let h = g.slice_rows(flat, i..i + 1)?;
        let h = g.reshape(h, shape.n_indicators + 1, shape.hidden)?;
        let h_prime = g.matmul(wt, h)?;
        let s = g.slice_rows(sims, i..i + 1)?;
        rows.push(g.matmul(s, h_prime)?);
    }
    Ok(g.concat_rows(&rows)?)
}

/// Risk probabilities (B x 1) from the fused status or, for the
/// similarity-only head, from the similarities.
pub fn head_forward(g: &mut Graph, vars: &IntegrationVars, flat: Var, sims: Var) -> Result<Var> {
    let logits = match vars.shape.head {
        HeadKind::Integrated => {
            let h_p = integrate_batch(g, vars, flat, sims)?;
            let w = vars.head_weight.expect("integrated head binds its weight");
            g.matmul(h_p, w)?
        }
        HeadKind::SimilarityOnly => {
            let u = vars.sim_weight.expect("similarity head binds its weight");
            g.matmul(sims, u)?
        }
    };
    let logits = g.add_row(logits, vars.bias)?;
    Ok(g.sigmoid(logits)?)
}

/// Single-patient fusion on plain arrays: `h` is `(N+1) x H`, `w_h` is
/// `(N+1) x K` and `s` has K entries.
pub fn integrate(w_h: &Array, h: &Array, s: &SimilarityVector) -> Result<IntegratedStatus> {
    let mut g = Graph::new();
    let w = g.constant(w_h.clone());
    let hv = g.constant(h.clone());
    let sv = g.constant(Array::row_vector(s.0.clone())?);
    let wt = g.transpose(w)?;
    let h_prime = g.matmul(wt, hv).map_err(|e| PpnError::Contract(e.to_string()))?;
    let h_p = g.matmul(sv, h_prime).map_err(|e| PpnError::Contract(e.to_string()))?;
    Ok(IntegratedStatus {
        h_prime: g.value(h_prime).clone(),
        h_p: g.value(h_p).clone(),
    })
}

/// `sigmoid(w . h_p + b)` for one fused status.
pub fn predict_risk(weight: &[f64], h_p: &[f64], bias: f64) -> Result<f64> {
    if weight.len() != h_p.len() {
        return Err(PpnError::Contract(format!("head weight has {} entries, h_p {}", weight.len(), h_p.len())));
    }
    let mut g = Graph::new();
    let x = g.constant(Array::row_vector(h_p.to_vec())?);
    let w = g.constant(Array::column_vector(weight.to_vec())?);
    let b = g.constant(Array::scalar(bias)?);
    let z = g.matmul(x, w)?;
    let z = g.add(z, b)?;
    let y = g.sigmoid(z)?;
    Ok(g.value(y).as_slice()[0])
}

/// Cosine similarities of one flattened status against flattened prototypes.
pub fn similarity_vector(flat: &[f64], prototypes: &[Vec<f64>]) -> Result<SimilarityVector> {
    let mut g = Graph::new();
    let h = g.constant(Array::row_vector(flat.to_vec())?);
    let p = g.constant(Array::from_rows(prototypes)?);
    let (s, _) = cosine_similarities(&mut g, h, p)?;
    Ok(SimilarityVector(g.value(s).as_slice().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let s = similarity_vector(&[1.0, 0.0, 0.0, 1.0], &[vec![1.0, 1.0, 0.0, 0.0]]).unwrap();
        assert!((s.0[0] - 0.5).abs() < 1e-15);
        let h = [0.3, -1.2, 2.0, 0.7];
        let s = similarity_vector(&h, &[h.to_vec(), vec![0.0, 0.0, 0.0, 0.0], vec![1.2, 0.3, 0.0, 0.0]]).unwrap();
        assert!((s.0[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.0[1], 0.0);
        assert!(s.0[2].abs() < 1e-15);
        assert!(s.0.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let h = [0.3, -1.2, 2.0, 0.7];
        let p = vec![1.0, 0.5, -0.25, 3.0];
        let a = similarity_vector(&h, std::slice::from_ref(&p)).unwrap().0[0];
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let scaled: Vec<f64> = p.iter().map(|x| x * c).collect();
            let b = similarity_vector(&h, &[scaled]).unwrap().0[0];
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_status_is_guarded() {
        let s = similarity_vector(&[0.0; 4], &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(s.0, vec![0.0, 0.0]);
    }

    #[test]
    fn integrate_examples() {
        let w = Array::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let h = Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = integrate(&w, &h, &SimilarityVector(vec![1.0])).unwrap();
        assert_eq!(out.h_prime.as_slice(), &[1.0, 1.0]);
        assert_eq!(out.h_p.as_slice(), &[1.0, 1.0]);

        let w = Array::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.5]]).unwrap();
        let h = Array::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let zero = integrate(&w, &h, &SimilarityVector(vec![0.0; 3])).unwrap();
        assert!(zero.h_p.as_slice().iter().all(|&v| v == 0.0));
        let s = SimilarityVector(vec![0.2, -0.7, 0.4]);
        let s2 = SimilarityVector(s.0.iter().map(|x| 2.0 * x).collect());
        let (a, b) = (integrate(&w, &h, &s).unwrap(), integrate(&w, &h, &s2).unwrap());
        for (x, y) in a.h_p.as_slice().iter().zip(b.h_p.as_slice()) {
            assert_eq!(2.0 * x, *y);
        }
        assert!(integrate(&w, &Array::zeros(3, 2), &s).is_err());
    }

    #[test]
    fn risk_examples() {
        assert_eq!(predict_risk(&[0.0, 0.0], &[3.0, -1.0], 0.0).unwrap(), 0.5);
        let r = predict_risk(&[1.0, -1.0], &[2.0, 1.0], 0.0).unwrap();
        assert!((r - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((r - 0.73106).abs() < 1e-5);
        let risks: Vec<f64> = [0.0, 2.0, 4.0].iter().map(|&b| predict_risk(&[0.1], &[1.0], b).unwrap()).collect();
        assert!(risks.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn nearest_prefers_lowest_index() {
        assert_eq!(SimilarityVector(vec![0.9, 0.1]).nearest(), 0);
        assert_eq!(SimilarityVector(vec![0.5, 0.5]).nearest(), 0);
        assert_eq!(SimilarityVector(vec![0.1, 0.3, 0.3]).nearest(), 1);
    }
}
