use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParameterSet;

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

/// Adam with bias correction. Frozen parameters are skipped entirely,
/// including their moment estimates and step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes every
    /// gradient in the set.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        let paths: Vec<String> = params
            .iter()
            .filter(|(_, p)| !p.is_frozen())
            .map(|(k, _)| k.to_string())
            .collect();
        for path in paths {
            let grad = params.grad(&path)?.as_slice().to_vec();
            let state = self.moments.entry(path.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                t: 0,
            });
            if state.m.len() != grad.len() {
                *state = Moments {
                    m: vec![0.0; grad.len()],
                    v: vec![0.0; grad.len()],
                    t: 0,
                };
            }
            state.t += 1;
            let bc1 = 1.0 - self.beta1.powi(state.t as i32);
            let bc2 = 1.0 - self.beta2.powi(state.t as i32);
            let value = params.value_mut(&path)?;
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}
