//! Challenge lifecycle: rolling Qualification submissions under a countdown,
//! the one-shot A2 evaluation, finalist selection and the three Final rounds.
//!
//! State changes only by applying [`Event`]s, so a challenge is rebuilt
//! exactly by replaying its log. [`ChallengeHandle`] serializes all writers.

mod engine;
mod events;
mod log;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    DomainError, JobId, ResourceBudget, SplitName, SubmissionId, SubmissionKind, TeamId, Timestamp,
};
use crate::metrics::LeaderboardEntry;
use crate::review::ReviewError;

pub use engine::{
    Challenge, FallbackChoice, FinalAccepted, JobPurpose, JobRecord, MethodReview,
    MethodReviewStatus, PhaseStatus, RollingOutcome, ScoreRecord, TeamPhaseState, TestBPlan,
};
pub use events::{Event, EventRecord};
pub use log::{read_event_log, write_jsonl, ChallengeHandle, EventLogWriter, LogError};

pub const DEFAULT_COUNTDOWN_SECONDS: i64 = 604_800;
pub const DEFAULT_N_FINALISTS: usize = 10;
pub const SINGLE_A2_REASON: &str = "single submission consumed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Qualification,
    Final,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Round {
    Round1,
    Feedback,
    Round2,
}

impl Round {
    pub const ALL: [Round; 3] = [Round::Round1, Round::Feedback, Round::Round2];

    pub fn as_str(self) -> &'static str {
        match self {
            Round::Round1 => "round1",
            Round::Feedback => "feedback",
            Round::Round2 => "round2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Board {
    A1,
    A2,
    B,
}

impl Board {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a1" => Some(Board::A1),
            "a2" => Some(Board::A2),
            "b" => Some(Board::B),
            _ => None,
        }
    }

    pub fn split(self) -> SplitName {
        match self {
            Board::A1 => SplitName::TestA1,
            Board::A2 => SplitName::TestA2,
            Board::B => SplitName::TestB,
        }
    }
}

/// What a rolling submission made during a countdown costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountdownPolicy {
    /// The ignored remainder of the countdown runs again from the violation,
    /// which leaves the next allowed time unchanged.
    #[default]
    RemainingRestart,
    /// A fresh full countdown starts at the violation.
    FullPenalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChallengeConfig {
    pub countdown_seconds: i64,
    pub countdown_policy: CountdownPolicy,
    pub n_finalists: usize,
    pub round1_budget: ResourceBudget,
    pub feedback_budget: ResourceBudget,
    pub feedback_split: SplitName,
    /// Budget for scoring jobs on the test sets.
    pub inference_budget: ResourceBudget,
    pub round_deadlines: BTreeMap<Round, Timestamp>,
    /// Reviewer ids allowed to decide review items.
    pub organizers: BTreeSet<String>,
    pub seed: u64,
}

impl Default for ChallengeConfig {
    fn default() -> Self {
        Self {
            countdown_seconds: DEFAULT_COUNTDOWN_SECONDS,
            countdown_policy: CountdownPolicy::default(),
            n_finalists: DEFAULT_N_FINALISTS,
            round1_budget: ResourceBudget::hours(120),
            feedback_budget: ResourceBudget::hours(24),
            feedback_split: SplitName::TrainingA,
            inference_budget: ResourceBudget::hours(2),
            round_deadlines: BTreeMap::new(),
            organizers: BTreeSet::from(["organizer".to_owned()]),
            seed: 0,
        }
    }
}

impl ChallengeConfig {
    pub fn validate(&self) -> Result<(), PhaseError> {
        if self.countdown_seconds < 0 {
            return Err(PhaseError::Config(
                "countdown_seconds must be non-negative".into(),
            ));
        }
        if self.n_finalists == 0 {
            return Err(PhaseError::Config("n_finalists must be positive".into()));
        }
        for budget in [
            &self.round1_budget,
            &self.feedback_budget,
            &self.inference_budget,
        ] {
            budget.validate()?;
        }
        if self.feedback_split.is_sequestered() {
            return Err(PhaseError::Config(format!(
                "feedback_split must be public, got {}",
                self.feedback_split
            )));
        }
        let deadlines: Vec<Timestamp> = Round::ALL
            .iter()
            .filter_map(|r| self.round_deadlines.get(r).copied())
            .collect();
        if deadlines.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PhaseError::Config(
                "round deadlines must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhaseError {
    #[error("invalid challenge config: {0}")]
    Config(String),
    #[error("operation needs the {expected:?} phase, challenge is in {actual:?}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("expected a {expected:?} submission, got {got:?}")]
    WrongKind {
        expected: SubmissionKind,
        got: SubmissionKind,
    },
    #[error("unknown team {0}")]
    UnknownTeam(TeamId),
    #[error("team {0} is not a finalist")]
    NotFinalist(TeamId),
    #[error("round {0} is not open")]
    RoundNotOpen(Round),
    #[error("round {round} closed at {deadline}")]
    DeadlinePassed { round: Round, deadline: Timestamp },
    #[error("{0}")]
    SingleSubmission(String),
    #[error("round2 requires confirming the renouncement of the round1 submission")]
    ConfirmationRequired,
    #[error("team {0} has no round1 submission to renounce")]
    Round1Missing(TeamId),
    #[error("round1 job of team {0} is still in flight")]
    Round1InFlight(TeamId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {job}: {message}")]
    JobState { job: JobId, message: String },
    #[error("jobs still in flight: {}", .0.iter().map(JobId::as_str).collect::<Vec<_>>().join(", "))]
    JobsInFlight(Vec<JobId>),
    #[error("unknown submission {0}")]
    UnknownSubmission(SubmissionId),
    #[error("event log: {0}")]
    Store(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Review(#[from] ReviewError),
}

/// Walks the A2 board in rank order inviting teams until `n` accept.
/// Returns `(invited, finalists)` in rank order.
pub fn select_finalists(
    a2_leaderboard: &[LeaderboardEntry],
    mut accepts: impl FnMut(&TeamId) -> bool,
    n: usize,
) -> (Vec<TeamId>, Vec<TeamId>) {
    let mut invited = Vec::new();
    let mut finalists = Vec::new();
    let mut seen = BTreeSet::new();
    for entry in a2_leaderboard {
        if finalists.len() >= n {
            break;
        }
        if !seen.insert(entry.team_id.clone()) {
            continue;
        }
        invited.push(entry.team_id.clone());
        if accepts(&entry.team_id) {
            finalists.push(entry.team_id.clone());
        }
    }
    (invited, finalists)
}
