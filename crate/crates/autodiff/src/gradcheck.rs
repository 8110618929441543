//! Central finite-difference check of analytic gradients.

use std::collections::BTreeMap;

use crate::array::Array;
use crate::error::AutodiffError;
use crate::graph::{Graph, Var};
use crate::params::ParameterSet;

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose perturbation crossed a kink (hinge, clamp, log floor or
    /// zero norm) and therefore have no two-sided derivative.
    pub skipped_kinks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub per_param: BTreeMap<String, ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param
            .values()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn skipped_kinks(&self) -> usize {
        self.per_param.values().map(|c| c.skipped_kinks).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<E, F>(build: &mut F, params: &ParameterSet) -> Result<(f64, Vec<u8>), E>
where
    E: From<AutodiffError>,
    F: FnMut(&mut Graph, &ParameterSet) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let root = build(&mut g, params)?;
    let value = g
        .value(root)
        .item()
        .ok_or_else(|| AutodiffError::NonScalarRoot(g.value(root).shape()))?;
    Ok((value, g.branch_signature().to_vec()))
}

/// Compares the analytic gradient of every parameter against central
/// differences with the given `step`.
///
/// The builder must construct the same scalar loss from `params` each time
/// it is called; a second evaluation at the base point that differs by even
/// one bit is reported as [`AutodiffError::NonDeterministic`].
pub fn gradient_check<E, F>(
    mut build: F,
    params: &ParameterSet,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
    F: FnMut(&mut Graph, &ParameterSet) -> Result<Var, E>,
{
    let mut analytic = params.clone();
    analytic.zero_grads();
    let mut g = Graph::new();
    let root = build(&mut g, &analytic)?;
    let base = g.value(root).item().ok_or_else(|| AutodiffError::NonScalarRoot(g.value(root).shape()))?;
    let base_sig = g.branch_signature().to_vec();
    g.backward(root)?;
    g.accumulate_param_grads(&mut analytic)?;
    drop(g);

    let (again, _) = evaluate(&mut build, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(AutodiffError::NonDeterministic {
            first: base,
            second: again,
        }
        .into());
    }

    let mut per_param = BTreeMap::new();
    let paths: Vec<String> = params.paths().map(str::to_string).collect();
    let mut probe = params.clone();
    for path in paths {
        let original = params.value(&path)?.clone();
        let grad = analytic.grad(&path)?.clone();
        let mut check = ParamCheck::default();
        for idx in 0..original.len() {
            let (r, c) = (idx / original.cols(), idx % original.cols());
            let x = original.get(r, c);

            let mut plus = original.clone();
            plus.set(r, c, x + step)?;
            probe.set_value(&path, plus)?;
            let (f_plus, sig_plus) = evaluate(&mut build, &probe)?;

            let mut minus = original.clone();
            minus.set(r, c, x - step)?;
            probe.set_value(&path, minus)?;
            let (f_minus, sig_minus) = evaluate(&mut build, &probe)?;

            if sig_plus != base_sig || sig_minus != base_sig {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let err = relative_error(grad.get(r, c), numeric);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        probe.set_value(&path, original)?;
        per_param.insert(path, check);
    }
    Ok(GradCheckReport {
        tolerance,
        per_param,
    })
}

/// Convenience for building a one-parameter set in tests and examples.
pub fn single_param(path: &str, value: Array) -> ParameterSet {
    let mut ps = ParameterSet::new();
    ps.insert(path, value).expect("fresh set");
    ps
}
