use ppn_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, PpnError>;

#[derive(Debug, Error)]
pub enum PpnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    /// A malformed dataset row or record; `record` is the patient id (or a
    /// line number when the id itself could not be read).
    #[error("ingestion error in record {record}: {msg}")]
    Ingest { record: String, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("model archive: {0}")]
    Archive(String),
}

impl PpnError {
    pub(crate) fn ingest(record: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Ingest {
            record: record.into(),
            msg: msg.into(),
        }
    }
}
