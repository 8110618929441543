//! JSON shapes exchanged with clients, shared by `ppn predict` and the
//! service so both paths produce the same numbers.

use ppn_core::data::{PatientRecord, WireRecord};
use ppn_core::interpretation::{trajectory, CohortStats, PrototypeCard, TrajectoryEntry};
use ppn_core::model::{PpnModel, Prediction};
use ppn_core::PpnError;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub risk: f64,
    pub similarity: Vec<f64>,
    pub nearest_prototype: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<TrajectoryEntry>>,
}

impl PredictResponse {
    pub fn build(model: &PpnModel, raw: &PatientRecord, with_trajectory: bool) -> Result<Self, PpnError> {
        let Prediction { risk, similarity, nearest_prototype } = model.predict(raw)?;
        let trajectory = if with_trajectory { Some(trajectory(model, raw)?) } else { None };
        Ok(Self { risk, similarity, nearest_prototype, trajectory })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub patients: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_format: String,
    pub k: usize,
    pub hidden: usize,
    pub n_indicators: usize,
    pub n_statics: usize,
    pub indicator_names: Vec<String>,
    pub static_names: Vec<String>,
    pub dataset: Option<DatasetInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypesResponse {
    pub static_names: Vec<String>,
    pub prototypes: Vec<PrototypeCard>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub id: String,
    pub n_visits: usize,
    pub label: u8,
    pub risk: f64,
    pub nearest_prototype: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientsResponse {
    pub patients: Vec<PatientSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortResponse {
    pub index: usize,
    pub stats: CohortStats,
    pub members: Vec<PatientSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientDetail {
    pub record: WireRecord,
    pub prediction: PredictResponse,
}

/// A rejected request: what went wrong and, when known, where.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ErrorBody {
    pub fn new(error: impl Into<String>, field: Option<String>) -> Self {
        Self { error: error.into(), field }
    }
}

impl std::fmt::Display for ErrorBody {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{field}: {}", self.error),
            None => f.write_str(&self.error),
        }
    }
}

impl std::error::Error for ErrorBody {}

/// Parses and checks a patient body against the model's column counts.
pub fn parse_record(model: &PpnModel, body: &[u8]) -> Result<PatientRecord, ErrorBody> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    let wire: WireRecord = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = (path != ".").then_some(path);
        ErrorBody::new(e.inner().to_string(), field)
    })?;
    let n = model.config.n_indicators;
    for (t, v) in wire.visits.iter().enumerate() {
        if v.values.len() != n {
            return Err(ErrorBody::new(
                format!("expected {n} indicator values, got {}", v.values.len()),
                Some(format!("visits[{t}].values")),
            ));
        }
    }
    if wire.statics.len() != model.config.n_statics {
        return Err(ErrorBody::new(
            format!("expected {} static values, got {}", model.config.n_statics, wire.statics.len()),
            Some("static".into()),
        ));
    }
    wire.into_record(false).map_err(|e| match e {
        PpnError::Ingest { msg, .. } => match msg.split_once(": ") {
            Some((field, rest)) if !field.contains(' ') => ErrorBody::new(rest, Some(field.to_string())),
            _ => ErrorBody::new(msg, None),
        },
        other => ErrorBody::new(other.to_string(), None),
    })
}
