//! Single-file model archive.
//!
//! Layout: the line `ppn-model-v1`, one line of JSON holding the manifest
//! and every non-tensor field, the line `payload <bytes>`, then the
//! parameters as row-major little-endian f64 in manifest order.

use std::fs;
use std::io::{BufRead, Read};
use std::path::Path;

use ppn_autodiff::Array;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats, PatientRecord, WireRecord};
use crate::error::{PpnError, Result};
use crate::memory::PrototypeMemory;
use crate::model::{ModelConfig, PpnModel};
use crate::training::TrainConfig;

pub const ARCHIVE_TAG: &str = "ppn-model-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    manifest: Vec<ManifestEntry>,
    model: ModelConfig,
    train_config: Option<TrainConfig>,
    stats: NormStats,
    memory: PrototypeMemory,
    indicator_names: Vec<String>,
    static_names: Vec<String>,
    sources: Vec<WireRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelArchive {
    pub model: PpnModel,
    /// Configuration the model was trained with, if known.
    pub train_config: Option<TrainConfig>,
    /// Raw records of the prototype source patients, so prototypes can be
    /// described without the training data at hand.
    pub sources: Vec<PatientRecord>,
}

fn bad(msg: impl Into<String>) -> PpnError {
    PpnError::Archive(msg.into())
}

impl ModelArchive {
    pub fn new(model: PpnModel, train_config: Option<TrainConfig>) -> Self {
        Self { model, train_config, sources: Vec::new() }
    }

    /// Attaches the raw source record of every prototype, taken from the
    /// training set.
    pub fn with_sources(mut self, train_set: &Dataset) -> Result<Self> {
        self.sources = self
            .model
            .memory
            .source_ids
            .iter()
            .map(|id| {
                train_set
                    .get(id)
                    .cloned()
                    .ok_or_else(|| PpnError::Integrity(format!("source patient `{id}` is not in the training set")))
            })
            .collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.model
            .params
            .iter()
            .map(|(path, p)| ManifestEntry { path: path.to_string(), rows: p.value().rows(), cols: p.value().cols() })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let header = Header {
            manifest: self.manifest(),
            model: m.config,
            train_config: self.train_config.clone(),
            stats: m.stats.clone(),
            memory: m.memory.clone(),
            indicator_names: m.indicator_names.clone(),
            static_names: m.static_names.clone(),
            sources: self.sources.iter().map(WireRecord::from_record).collect(),
        };
        let mut payload = Vec::with_capacity(m.params.num_scalars() * 8);
        for (_, p) in m.params.iter() {
            for v in p.value().as_slice() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = format!("{ARCHIVE_TAG}\n{}\npayload {}\n", serde_json::to_string(&header)?, payload.len()).into_bytes();
        out.extend(payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut line = String::new();
        let mut next_line = |cursor: &mut &[u8]| -> Result<String> {
            line.clear();
            cursor.read_line(&mut line)?;
            if !line.ends_with('\n') {
                return Err(bad("truncated archive header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        let tag = next_line(&mut cursor)?;
        if tag != ARCHIVE_TAG {
            return Err(bad(format!("expected `{ARCHIVE_TAG}`, found `{tag}`")));
        }
        let header: Header = serde_json::from_str(&next_line(&mut cursor)?).map_err(|e| bad(format!("header: {e}")))?;
        let len_line = next_line(&mut cursor)?;
        let n_bytes: usize = len_line
            .strip_prefix("payload ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad(format!("bad payload line `{len_line}`")))?;
        let mut payload = Vec::new();
        cursor.read_to_end(&mut payload)?;
        if payload.len() != n_bytes {
            return Err(bad(format!("payload declares {n_bytes} bytes but {} follow", payload.len())));
        }

        // a fresh model fixes which parameters must be present and their shapes
        let mut model = PpnModel::new(header.model, header.stats, header.indicator_names, header.static_names, 0)?;
        let expected: Vec<ManifestEntry> = ModelArchive::new(model.clone(), None).manifest();
        let mut sorted = header.manifest.clone();
        sorted.sort_by(|a, b| a.path.cmp(&b.path));
        let mut want = expected.clone();
        want.sort_by(|a, b| a.path.cmp(&b.path));
        if sorted != want {
            return Err(bad("manifest does not match the model configuration"));
        }
        let total: usize = header.manifest.iter().map(|e| e.rows * e.cols).sum();
        if total * 8 != n_bytes {
            return Err(bad(format!("manifest needs {} bytes, payload has {n_bytes}", total * 8)));
        }
        let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for e in &header.manifest {
            let data: Vec<f64> = chunks.by_ref().take(e.rows * e.cols).collect();
            let value = Array::new(e.rows, e.cols, data).map_err(|err| bad(format!("{}: {err}", e.path)))?;
            model.set_param(&e.path, value)?;
        }
        if header.memory.k != model.k() || header.memory.dim != model.config.flat_dim() {
            return Err(bad("prototype memory does not match the model configuration"));
        }
        model.memory = header.memory;
        if let Some(cfg) = &header.train_config {
            cfg.validate()?;
        }
        let sources = header
            .sources
            .into_iter()
            .map(|w| w.into_record(true))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| bad(format!("sources: {e}")))?;
        Ok(Self { model, train_config: header.train_config, sources })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
