use serde::{Deserialize, Serialize};

use crate::domain::{six_places, six_places_pair, SubmissionId, TeamId, Timestamp};

/// Which training data produced the evaluated model. On the final board,
/// `B` rows correspond to the bold entries and `A` rows to the regular ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainedOn {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub rank: usize,
    pub team_id: TeamId,
    pub submission_id: SubmissionId,
    #[serde(with = "six_places")]
    pub auc_severity: f64,
    #[serde(with = "six_places")]
    pub auc_presence: f64,
    #[serde(with = "six_places_pair")]
    pub ci_severity: (f64, f64),
    pub submitted_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained_on: Option<TrainedOn>,
}

/// Orders by descending severity AUC; presence AUC never affects the order.
/// Equal severity AUCs go to the earlier submission, then to team id.
pub fn rank_leaderboard(mut entries: Vec<LeaderboardEntry>) -> Vec<LeaderboardEntry> {
    entries.sort_by(|a, b| {
        b.auc_severity
            .total_cmp(&a.auc_severity)
            .then(a.submitted_at.cmp(&b.submitted_at))
            .then_with(|| a.team_id.cmp(&b.team_id))
    });
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    entries
}
