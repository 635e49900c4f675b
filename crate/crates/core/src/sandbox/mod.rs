//! Runs solution adapters under resource budgets. Adapters see data only
//! through the shim, which serves the job's own subset and withholds labels
//! from inference.

mod adapters;
mod artifact;
mod host;
mod protocol;
mod runner;
mod server;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::DatasetSplit;
use crate::domain::{JobId, JobMode, JobStatus, PredictionSet, SubjectId, SubjectRecord};

pub use adapters::{run_adapter, AdapterSpec, REFERENCE_ADAPTERS};
pub use artifact::{content_hash, ModelArtifact, ModelManifest};
pub use host::run_host;
pub use protocol::{
    ErrorCode, JobContext, Request, Response, Shim, ShimError, SubjectFeatures, Transport,
};
pub use runner::{Backend, Runner};

/// Cohort records plus the split the runner resolves subsets from.
#[derive(Debug, Clone, Default)]
pub struct DataSource {
    pub records: BTreeMap<SubjectId, SubjectRecord>,
    pub split: DatasetSplit,
}

impl DataSource {
    pub fn new(cohort: Vec<SubjectRecord>, split: DatasetSplit) -> Self {
        Self {
            records: cohort
                .into_iter()
                .map(|r| (r.subject_id.clone(), r))
                .collect(),
            split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataField {
    Features,
    Labels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessOutcome {
    Served,
    /// Refused by the shim; recorded as a sequestration violation attempt.
    Denied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub mode: JobMode,
    pub subject_id: SubjectId,
    pub field: DataField,
    /// Unix milliseconds.
    pub at_ms: i64,
    pub outcome: AccessOutcome,
}

#[derive(Debug, Error)]
pub enum SandboxError {
    /// The job could not be set up; distinct from an adapter failure.
    #[error("job spec error: {0}")]
    Spec(String),
    #[error("invalid predictions: {0}")]
    InvalidPredictions(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct JobOutcome {
    pub job_id: JobId,
    pub status: JobStatus,
    /// The trained model; for inference jobs with a preparation phase, the
    /// model fitted there.
    pub model: Option<ModelArtifact>,
    pub predictions: Option<PredictionSet>,
    pub raw_log: String,
    /// Seconds.
    pub wall_clock_used: f64,
    /// Peak bytes observed in the job's scratch directory.
    pub scratch_used: u64,
    pub audit: Vec<AuditEntry>,
    pub error: Option<String>,
}

impl JobOutcome {
    pub fn model_ref(&self) -> Option<&str> {
        self.model.as_ref().map(ModelArtifact::model_ref)
    }
}
