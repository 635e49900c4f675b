//! Evaluation mathematics: tied-rank AUC, ROC curves, the paired DeLong test,
//! percentile bootstrap intervals, ensembling, rank matrices and leaderboards.
//!
//! Every routine is pure and reentrant.

mod auc;
mod bootstrap;
mod delong;
mod ensemble;
mod leaderboard;
mod rank;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::SubjectId;

pub use auc::{
    auc, auc_scores, eligible_samples, midranks, presence_auc, roc_curve, roc_curve_scores,
    severity_auc, Endpoint,
};
pub use bootstrap::{
    bootstrap_ci, bootstrap_distribution, bootstrap_roc_replicates, percentile,
    BOOTSTRAP_ITERATIONS, CI_LOWER, CI_UPPER,
};
pub use delong::{delong_paired, two_sided_p};
pub use ensemble::ensemble_mean;
pub use leaderboard::{rank_leaderboard, LeaderboardEntry, TrainedOn};
pub use rank::{rank_matrix, DisplayFilter, RankMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("missing predictions for {} eligible subject(s): {}", .missing.len(), preview(.missing))]
    Coverage { missing: Vec<SubjectId> },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("non-finite score at position {0}")]
    NonFinite(usize),
    #[error("bootstrap gave up after {redraws} single-class redraws")]
    BootstrapExhausted { redraws: usize },
}

fn preview(ids: &[SubjectId]) -> String {
    let mut s: Vec<&str> = ids.iter().take(8).map(SubjectId::as_str).collect();
    if ids.len() > 8 {
        s.push("...");
    }
    s.join(", ")
}

/// A classifier score with its binary ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub subject_id: SubjectId,
    pub score: f64,
    pub label: bool,
}

impl ScoredSample {
    pub fn new(subject_id: impl Into<SubjectId>, score: f64, label: bool) -> Self {
        Self {
            subject_id: subject_id.into(),
            score,
            label,
        }
    }
}

pub(crate) fn split_samples(samples: &[ScoredSample]) -> (Vec<f64>, Vec<bool>) {
    samples.iter().map(|s| (s.score, s.label)).unzip()
}

pub(crate) fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|l| **l).count();
    (pos, labels.len() - pos)
}
