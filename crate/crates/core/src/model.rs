//! The assembled network: encoder, prototype memory, integration and head.

use ppn_autodiff::{Array, Graph, ParameterSet, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats, PatientRecord};
use crate::encoder::{encode_batch, EncoderParams, EncoderVars, StaticActivation};
use crate::error::{PpnError, Result};
use crate::integration::{
    cosine_similarities, head_forward, transform, HeadKind, IntegrationParams, IntegrationVars, SimilarityTransform,
    SimilarityVector,
};
use crate::memory::{PrototypeMemory, PROTOTYPES};

/// Patients per graph when scoring or embedding. Results do not depend on
/// it: every row is computed independently of the rest of its batch.
pub const INFERENCE_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_indicators: usize,
    pub n_statics: usize,
    pub hidden: usize,
    pub k: usize,
    pub static_activation: StaticActivation,
    pub similarity: SimilarityTransform,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderParams {
        EncoderParams {
            n_indicators: self.n_indicators,
            n_statics: self.n_statics,
            hidden: self.hidden,
            static_activation: self.static_activation,
        }
    }

    pub fn integration(&self) -> IntegrationParams {
        IntegrationParams {
            n_indicators: self.n_indicators,
            hidden: self.hidden,
            k: self.k,
            head: self.head,
            similarity: self.similarity,
        }
    }

    pub fn flat_dim(&self) -> usize {
        (self.n_indicators + 1) * self.hidden
    }
}

/// Every parameter bound into one graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub integration: IntegrationVars,
    pub prototypes: Var,
}

/// Graph nodes of a batch forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BatchForward {
    /// B x (N+1)H flattened health status.
    pub flat: Var,
    /// B x K raw cosine similarities.
    pub similarity: Var,
    /// B x 1 risk probabilities.
    pub risk: Var,
}

/// Scoring output for one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub risk: f64,
    pub similarity: Vec<f64>,
    pub nearest_prototype: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpnModel {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub memory: PrototypeMemory,
    /// Training-split statistics applied to every raw input.
    pub stats: NormStats,
    pub indicator_names: Vec<String>,
    pub static_names: Vec<String>,
}

impl PpnModel {
    /// A freshly initialized model. Prototypes start as random vectors and
    /// carry no provenance until the memory is initialized from data.
    pub fn new(
        config: ModelConfig,
        stats: NormStats,
        indicator_names: Vec<String>,
        static_names: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        if stats.n_indicators() != config.n_indicators || stats.n_statics() != config.n_statics {
            return Err(PpnError::Config("normalization statistics do not match the model dimensions".into()));
        }
        if indicator_names.len() != config.n_indicators || static_names.len() != config.n_statics {
            return Err(PpnError::Config("feature names do not match the model dimensions".into()));
        }
        let memory = PrototypeMemory::new(config.k, config.flat_dim())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        config.encoder().init(&mut params, &mut rng)?;
        let bound = 1.0 / (config.hidden as f64).sqrt();
        params.insert(PROTOTYPES, crate::encoder::uniform(&mut rng, config.k, config.flat_dim(), bound))?;
        config.integration().init(&mut params, &mut rng)?;
        Ok(Self {
            config,
            params,
            memory,
            stats,
            indicator_names,
            static_names,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn bind(&self, g: &mut Graph, frozen_as_constants: bool) -> Result<ModelVars> {
        Ok(ModelVars {
            encoder: self.config.encoder().bind(g, &self.params, frozen_as_constants)?,
            integration: self.config.integration().bind(g, &self.params, frozen_as_constants)?,
            prototypes: crate::encoder::bind(g, &self.params, PROTOTYPES, frozen_as_constants)?,
        })
    }

    /// Encodes, compares with the prototypes and predicts, for normalized
    /// records.
    pub fn forward(&self, g: &mut Graph, vars: &ModelVars, records: &[&PatientRecord]) -> Result<BatchForward> {
        let flat = encode_batch(g, &vars.encoder, records)?;
        let (similarity, _) = cosine_similarities(g, flat, vars.prototypes)?;
        let fused = transform(g, similarity, self.config.similarity)?;
        let risk = head_forward(g, &vars.integration, flat, fused)?;
        Ok(BatchForward { flat, similarity, risk })
    }

    /// Prototype risks `y_j` (K x 1): the pipeline run with each prototype
    /// in place of a patient's health status.
    pub fn prototype_risk_var(&self, g: &mut Graph, vars: &ModelVars) -> Result<Var> {
        let (s, _) = cosine_similarities(g, vars.prototypes, vars.prototypes)?;
        let s = transform(g, s, self.config.similarity)?;
        head_forward(g, &vars.integration, vars.prototypes, s)
    }

    pub fn prototype_risks(&self) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true)?;
        let y = self.prototype_risk_var(&mut g, &vars)?;
        Ok(g.value(y).as_slice().to_vec())
    }

    /// Normalizes a raw record with the model's training statistics.
    pub fn normalize(&self, raw: &PatientRecord) -> Result<PatientRecord> {
        self.stats.apply(raw)
    }

    /// Model-ready records: raw datasets are normalized with the model's
    /// statistics; normalized ones must have used those same statistics.
    pub fn prepare(&self, ds: &Dataset) -> Result<Vec<PatientRecord>> {
        match &ds.stats {
            Some(s) if s == &self.stats => Ok(ds.records.clone()),
            Some(_) => Err(PpnError::Contract("dataset was normalized with different statistics".into())),
            None => ds.records.iter().map(|r| self.normalize(r)).collect(),
        }
    }

    /// Flattened health status of each normalized record.
    pub fn embed(&self, records: &[PatientRecord]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(INFERENCE_BATCH) {
            let mut g = Graph::new();
            let enc = self.config.encoder().bind(&mut g, &self.params, true)?;
            let refs: Vec<&PatientRecord> = chunk.iter().collect();
            let flat = encode_batch(&mut g, &enc, &refs)?;
            let v = g.value(flat);
            out.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Scores normalized records.
    pub fn score(&self, records: &[&PatientRecord]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(INFERENCE_BATCH) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, true)?;
            let f = self.forward(&mut g, &vars, chunk)?;
            let (s, y) = (g.value(f.similarity), g.value(f.risk));
            for b in 0..chunk.len() {
                let similarity = SimilarityVector(s.row(b).to_vec());
                out.push(Prediction {
                    risk: y.as_slice()[b],
                    nearest_prototype: similarity.nearest(),
                    similarity: similarity.0,
                });
            }
        }
        Ok(out)
    }

    /// Scores one raw record.
    pub fn predict(&self, raw: &PatientRecord) -> Result<Prediction> {
        let rec = self.normalize(raw)?;
        Ok(self.score(&[&rec])?.remove(0))
    }

    /// Scores a dataset (raw, or normalized with the model's statistics).
    pub fn score_dataset(&self, ds: &Dataset) -> Result<Vec<Prediction>> {
        let recs = self.prepare(ds)?;
        let refs: Vec<&PatientRecord> = recs.iter().collect();
        self.score(&refs)
    }

    /// Flattened prototype `j`.
    pub fn prototype(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.k() {
            return Err(PpnError::Contract(format!("prototype {j} out of range 0..{}", self.k())));
        }
        PrototypeMemory::prototype(&self.params, j)
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_param(&mut self, path: &str, value: Array) -> Result<()> {
        Ok(self.params.set_value(path, value)?)
    }
}
