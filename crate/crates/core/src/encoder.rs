//! Multi-channel encoder: one GRU per indicator plus a one-layer network for
//! the static features, stacked into the `(N+1) x H` health status.

use ppn_autodiff::{Array, Graph, ParameterSet, Var};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::data::PatientRecord;
use crate::error::{PpnError, Result};

/// Per-step channel input: imputed z-value and observed flag.
pub const GRU_INPUT: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticActivation {
    #[default]
    Tanh,
    Identity,
}

/// Shape of the encoder and the location of its parameters.
///
/// Channel `n` owns `encoder.gru.{n}.w_in` (2 x 3H, gate blocks `[z|r|c]`),
/// `u_zr` (H x 2H), `u_c` (H x H) and `bias` (1 x 3H). The static network
/// is `encoder.static.weight` (M x H) and `encoder.static.bias` (1 x H).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub n_indicators: usize,
    pub n_statics: usize,
    pub hidden: usize,
    pub static_activation: StaticActivation,
}

pub const ENCODER_PREFIX: &str = "encoder.";

pub fn gru_path(channel: usize, part: &str) -> String {
    format!("encoder.gru.{channel}.{part}")
}

pub const STATIC_WEIGHT: &str = "encoder.static.weight";
pub const STATIC_BIAS: &str = "encoder.static.bias";

/// Uniform(-bound, bound) matrix.
pub(crate) fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Array::new(rows, cols, data).expect("finite uniform draws")
}

/// Binds `path`, as a constant when frozen and `frozen_as_constants` is set.
pub(crate) fn bind(g: &mut Graph, params: &ParameterSet, path: &str, frozen_as_constants: bool) -> Result<Var> {
    if frozen_as_constants && params.is_frozen(path)? {
        Ok(g.constant(params.value(path)?.clone()))
    } else {
        Ok(g.param(params, path)?)
    }
}

/// One channel's GRU parameters bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_in: Var,
    pub u_zr: Var,
    pub u_c: Var,
    pub bias: Var,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub channels: Vec<GruVars>,
    pub static_weight: Var,
    pub static_bias: Var,
    pub shape: EncoderParams,
}

impl EncoderParams {
    pub fn flat_dim(&self) -> usize {
        (self.n_indicators + 1) * self.hidden
    }

    /// Adds freshly initialized encoder parameters, uniform in `±1/sqrt(H)`.
    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) -> Result<()> {
        if self.hidden == 0 || self.n_indicators == 0 {
            return Err(PpnError::Config("encoder needs H > 0 and at least one indicator".into()));
        }
        let h = self.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        for n in 0..self.n_indicators {
            params.insert(gru_path(n, "w_in"), uniform(rng, GRU_INPUT, 3 * h, bound))?;
            params.insert(gru_path(n, "u_zr"), uniform(rng, h, 2 * h, bound))?;
            params.insert(gru_path(n, "u_c"), uniform(rng, h, h, bound))?;
            params.insert(gru_path(n, "bias"), uniform(rng, 1, 3 * h, bound))?;
        }
        params.insert(STATIC_WEIGHT, uniform(rng, self.n_statics, h, bound))?;
        params.insert(STATIC_BIAS, uniform(rng, 1, h, bound))?;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, params: &ParameterSet, frozen_as_constants: bool) -> Result<EncoderVars> {
        let channels = (0..self.n_indicators)
            .map(|n| {
                Ok(GruVars {
                    w_in: bind(g, params, &gru_path(n, "w_in"), frozen_as_constants)?,
                    u_zr: bind(g, params, &gru_path(n, "u_zr"), frozen_as_constants)?,
                    u_c: bind(g, params, &gru_path(n, "u_c"), frozen_as_constants)?,
                    bias: bind(g, params, &gru_path(n, "bias"), frozen_as_constants)?,
                    hidden: self.hidden,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderVars {
            channels,
            static_weight: bind(g, params, STATIC_WEIGHT, frozen_as_constants)?,
            static_bias: bind(g, params, STATIC_BIAS, frozen_as_constants)?,
            shape: *self,
        })
    }
}

/// One GRU step for a batch: `x` is `B x 2`, `h` is `B x H`.
pub fn gru_step(g: &mut Graph, p: &GruVars, x: Var, h: Var) -> Result<Var> {
    let hd = p.hidden;
    let xw = g.matmul(x, p.w_in)?;
    let xw = g.add_row(xw, p.bias)?;
    let x_zr = g.slice_cols(xw, 0..2 * hd)?;
    let x_c = g.slice_cols(xw, 2 * hd..3 * hd)?;
    let h_zr = g.matmul(h, p.u_zr)?;
    let zr = g.add(x_zr, h_zr)?;
    let zr = g.sigmoid(zr)?;
    let z = g.slice_cols(zr, 0..hd)?;
    let r = g.slice_cols(zr, hd..2 * hd)?;
    let rh = g.mul(r, h)?;
    let rh = g.matmul(rh, p.u_c)?;
    let cand = g.add(x_c, rh)?;
    let cand = g.tanh(cand)?;
    // (1 - z) * h + z * cand
    let step = g.sub(cand, h)?;
    let step = g.mul(z, step)?;
    Ok(g.add(h, step)?)
}

/// Final hidden state (1 x H) of one `T x 2` input sequence, from `h_0 = 0`.
pub fn gru_forward(g: &mut Graph, p: &GruVars, sequence: &Array) -> Result<Var> {
    if sequence.rows() == 0 || sequence.cols() != GRU_INPUT {
        return Err(PpnError::Contract(format!(
            "GRU input must be T x {GRU_INPUT} with T >= 1, got {:?}",
            sequence.shape()
        )));
    }
    let mut h = g.constant(Array::zeros(1, p.hidden));
    for t in 0..sequence.rows() {
        let x = g.constant(Array::new(1, GRU_INPUT, sequence.row(t).to_vec())?);
        h = gru_step(g, p, x, h)?;
    }
    Ok(h)
}

fn check_record(shape: &EncoderParams, r: &PatientRecord) -> Result<()> {
    if r.n_indicators() != shape.n_indicators || r.n_statics() != shape.n_statics {
        return Err(PpnError::Contract(format!(
            "record {} has {} indicators / {} statics, encoder expects {} / {}",
            r.id,
            r.n_indicators(),
            r.n_statics(),
            shape.n_indicators,
            shape.n_statics
        )));
    }
    Ok(())
}

/// Channel `n` of a normalized record as the `T x 2` GRU input.
pub fn channel_input(r: &PatientRecord, n: usize) -> Array {
    let data = (0..r.n_visits())
        .flat_map(|t| [r.cell(t, n), if r.observed(t, n) { 1.0 } else { 0.0 }])
        .collect();
    Array::new(r.n_visits(), GRU_INPUT, data).expect("normalized cells are finite")
}

/// Encodes normalized records into a `B x (N+1)H` matrix whose row `b` is
/// the row-major flattening of patient `b`'s health status.
///
/// Patients are processed as packed sequences sorted by length: at step `t`
/// only the patients with more than `t` visits are advanced, so each row
/// sees exactly the arithmetic of a batch of one.
pub fn encode_batch(g: &mut Graph, enc: &EncoderVars, records: &[&PatientRecord]) -> Result<Var> {
    let shape = &enc.shape;
    if records.is_empty() {
        return Err(PpnError::Contract("cannot encode an empty batch".into()));
    }
    for r in records {
        check_record(shape, r)?;
    }
    let b = records.len();
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| records[j].n_visits().cmp(&records[i].n_visits()));
    let lens: Vec<usize> = order.iter().map(|&i| records[i].n_visits()).collect();
    let t_max = lens[0];

    let mut blocks = Vec::with_capacity(shape.n_indicators + 1);
    for (n, p) in enc.channels.iter().enumerate() {
        let mut h = g.constant(Array::zeros(b, shape.hidden));
        for t in 0..t_max {
            let active = lens.iter().take_while(|&&l| l > t).count();
            let mut x = Vec::with_capacity(active * GRU_INPUT);
            for &i in &order[..active] {
                let r = records[i];
                x.push(r.cell(t, n));
                x.push(if r.observed(t, n) { 1.0 } else { 0.0 });
            }
            let x = g.constant(Array::new(active, GRU_INPUT, x)?);
            if active == b {
                h = gru_step(g, p, x, h)?;
            } else {
                let head = g.slice_rows(h, 0..active)?;
                let head = gru_step(g, p, x, head)?;
                let tail = g.slice_rows(h, active..b)?;
                h = g.concat_rows(&[head, tail])?;
            }
        }
        blocks.push(h);
    }

    let statics: Vec<f64> = order.iter().flat_map(|&i| records[i].statics.iter().copied()).collect();
    let s = g.constant(Array::new(b, shape.n_statics, statics)?);
    let hs = g.matmul(s, enc.static_weight)?;
    let hs = g.add_row(hs, enc.static_bias)?;
    let hs = match shape.static_activation {
        StaticActivation::Tanh => g.tanh(hs)?,
        StaticActivation::Identity => hs,
    };
    blocks.push(hs);
    let flat = g.concat_cols(&blocks)?;

    if order.iter().enumerate().all(|(k, &i)| k == i) {
        return Ok(flat);
    }
    let mut position = vec![0; b];
    for (k, &i) in order.iter().enumerate() {
        position[i] = k;
    }
    let rows = position
        .iter()
        .map(|&k| g.slice_rows(flat, k..k + 1))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(g.concat_rows(&rows)?)
}

/// The `(N+1) x H` latent matrix of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct HealthStatus {
    pub matrix: Array,
}

impl HealthStatus {
    pub fn from_flat(flat: &[f64], n_indicators: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            matrix: Array::new(n_indicators + 1, hidden, flat.to_vec())?,
        })
    }

    pub fn flat(&self) -> &[f64] {
        self.matrix.as_slice()
    }
}

/// Encodes one normalized record with the encoder parameters in `params`.
pub fn encode_patient(shape: &EncoderParams, params: &ParameterSet, record: &PatientRecord) -> Result<HealthStatus> {
    let mut g = Graph::new();
    let enc = shape.bind(&mut g, params, true)?;
    let flat = encode_batch(&mut g, &enc, &[record])?;
    HealthStatus::from_flat(g.value(flat).as_slice(), shape.n_indicators, shape.hidden)
}
