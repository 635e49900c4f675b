use std::fmt;

use serde::{Deserialize, Serialize};

use super::{JobId, ResourceBudget, SplitName, SubmissionId, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobMode {
    Train,
    Infer,
}

impl fmt::Display for JobMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobMode::Train => "train",
            JobMode::Infer => "infer",
        })
    }
}

/// Where the log of a finished job goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogRoute {
    /// Sequestered training: redacted, then a human decides.
    Review,
    /// Public-data training: complete logs go straight to the team.
    FullRelease,
    /// Scoring on hidden test sets: only the status is reported.
    Withheld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: JobId,
    pub submission_id: SubmissionId,
    pub split_name: SplitName,
    pub budget: ResourceBudget,
    pub seed: u64,
    pub mode: JobMode,
    /// For inference-algorithm submissions: the public split the
    /// participant's model is fitted on before scoring `split_name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prepare_split: Option<SplitName>,
    /// For scoring jobs that reuse a model trained earlier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_ref: Option<String>,
    pub log_route: LogRoute,
    pub issued_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Completed,
    Failed,
    TimedOut,
    QuotaExceeded,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        !matches!(self, JobStatus::Queued | JobStatus::Running)
    }
}
