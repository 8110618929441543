use crate::error::{PpnError, Result};
use crate::data::NormStats;

/// Stored in unobserved cells of a raw record. Never read as a measurement.
pub const MISSING: f64 = 0.0;

/// One patient's visits, observation mask, static features and outcome.
///
/// `values` is a `T x N` row-major matrix. In a raw record, unobserved cells
/// hold [`MISSING`]; after normalization they hold the imputed z-score and
/// the mask still says which cells were measured.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    n_indicators: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    pub statics: Vec<f64>,
    pub label: u8,
    /// Generating subtype of a synthetic patient. Evaluation-only metadata:
    /// nothing on the model's input path reads it.
    pub subtype: Option<usize>,
}

impl PatientRecord {
    pub fn new(
        id: impl Into<String>,
        n_indicators: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
        statics: Vec<f64>,
        label: u8,
    ) -> Result<Self> {
        let id = id.into();
        if n_indicators == 0 {
            return Err(PpnError::ingest(&id, "no indicators"));
        }
        if values.is_empty() {
            return Err(PpnError::ingest(&id, "patient has no visits (T = 0)"));
        }
        if !values.len().is_multiple_of(n_indicators) || mask.len() != values.len() {
            return Err(PpnError::ingest(
                &id,
                format!(
                    "{} values and {} mask cells do not form rows of {n_indicators}",
                    values.len(),
                    mask.len()
                ),
            ));
        }
        if label > 1 {
            return Err(PpnError::ingest(&id, format!("label {label} is not binary")));
        }
        if let Some(s) = statics.iter().find(|s| !s.is_finite()) {
            return Err(PpnError::ingest(&id, format!("non-finite static value {s}")));
        }
        let mut values = values;
        for (v, &m) in values.iter_mut().zip(&mask) {
            if !m {
                *v = MISSING;
            } else if !v.is_finite() {
                return Err(PpnError::ingest(&id, format!("non-finite observed value {v}")));
            }
        }
        Ok(Self {
            id,
            n_indicators,
            values,
            mask,
            statics,
            label,
            subtype: None,
        })
    }

    /// Builds from per-visit optional values (`None` = unobserved).
    pub fn from_visits(
        id: impl Into<String>,
        visits: &[Vec<Option<f64>>],
        statics: Vec<f64>,
        label: u8,
    ) -> Result<Self> {
        let id = id.into();
        let n = visits.first().map_or(0, Vec::len);
        if visits.iter().any(|v| v.len() != n) {
            return Err(PpnError::ingest(&id, "visits have differing indicator counts"));
        }
        let values = visits.iter().flatten().map(|v| v.unwrap_or(MISSING)).collect();
        let mask = visits.iter().flatten().map(Option::is_some).collect();
        Self::new(id, n.max(1), values, mask, statics, label)
    }

    pub fn with_subtype(mut self, subtype: usize) -> Self {
        self.subtype = Some(subtype);
        self
    }

    pub fn n_visits(&self) -> usize {
        self.values.len() / self.n_indicators
    }

    pub fn n_indicators(&self) -> usize {
        self.n_indicators
    }

    pub fn n_statics(&self) -> usize {
        self.statics.len()
    }

    pub fn observed(&self, t: usize, n: usize) -> bool {
        self.mask[t * self.n_indicators + n]
    }

    /// Measured value, or `None` for an unobserved cell.
    pub fn value(&self, t: usize, n: usize) -> Option<f64> {
        let i = t * self.n_indicators + n;
        self.mask[i].then(|| self.values[i])
    }

    /// Stored cell content regardless of the mask; for a normalized record
    /// this is the imputed model input.
    pub fn cell(&self, t: usize, n: usize) -> f64 {
        self.values[t * self.n_indicators + n]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The first `t` visits.
    pub fn prefix(&self, t: usize) -> Result<Self> {
        if t == 0 || t > self.n_visits() {
            return Err(PpnError::Contract(format!(
                "prefix length {t} outside 1..={}",
                self.n_visits()
            )));
        }
        let cut = t * self.n_indicators;
        Ok(Self {
            values: self.values[..cut].to_vec(),
            mask: self.mask[..cut].to_vec(),
            ..self.clone()
        })
    }

    /// Keeps only the listed visits, in the given order.
    pub(crate) fn select_visits(&self, visits: &[usize]) -> Self {
        let n = self.n_indicators;
        let mut values = Vec::with_capacity(visits.len() * n);
        let mut mask = Vec::with_capacity(visits.len() * n);
        for &t in visits {
            values.extend_from_slice(&self.values[t * n..(t + 1) * n]);
            mask.extend_from_slice(&self.mask[t * n..(t + 1) * n]);
        }
        Self {
            values,
            mask,
            ..self.clone()
        }
    }

    pub(crate) fn unobserve(&mut self, t: usize, n: usize) {
        let i = t * self.n_indicators + n;
        self.mask[i] = false;
        self.values[i] = MISSING;
    }

    /// Z-scores observed cells, fills the rest by carrying the last
    /// observation forward (or the training mean, z = 0, before the first
    /// observation), and z-scores the statics.
    pub(crate) fn normalized(&self, stats: &NormStats) -> Self {
        let n = self.n_indicators;
        let mut values = vec![0.0; self.values.len()];
        for ind in 0..n {
            let mut last = 0.0;
            for t in 0..self.n_visits() {
                let i = t * n + ind;
                if self.mask[i] {
                    last = (self.values[i] - stats.indicator_mean[ind]) / stats.indicator_std[ind];
                }
                values[i] = last;
            }
        }
        let statics = self
            .statics
            .iter()
            .enumerate()
            .map(|(j, s)| (s - stats.static_mean[j]) / stats.static_std[j])
            .collect();
        Self {
            values,
            statics,
            ..self.clone()
        }
    }
}
