use serde::{Deserialize, Serialize};

use crate::domain::{JobId, JobSpec, JobStatus, Submission, SubmissionId, Team, TeamId, Timestamp};
use crate::metrics::TrainedOn;
use crate::review::{ReviewDecision, ReviewItem};

use super::engine::ScoreRecord;
use super::{Board, ChallengeConfig, Round};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    ChallengeCreated {
        config: ChallengeConfig,
    },
    TeamRegistered {
        team: Team,
    },
    RollingAccepted {
        submission: Submission,
        job: JobSpec,
        next_allowed_at: Timestamp,
    },
    RollingRejected {
        team_id: TeamId,
        next_allowed_at: Timestamp,
    },
    A2Accepted {
        submission: Submission,
        job: JobSpec,
    },
    A2Rejected {
        team_id: TeamId,
        reason: String,
    },
    QualificationClosed {
        invited: Vec<TeamId>,
        finalists: Vec<TeamId>,
    },
    RoundOpened {
        round: Round,
    },
    RoundClosed {
        round: Round,
    },
    FinalSubmissionAccepted {
        round: Round,
        submission: Submission,
        job: JobSpec,
        renounced: Option<SubmissionId>,
    },
    JobStarted {
        job_id: JobId,
    },
    JobFinished {
        job_id: JobId,
        status: JobStatus,
        model_ref: Option<String>,
    },
    ReviewItemCreated {
        item: ReviewItem,
    },
    ReviewDecided {
        item_id: String,
        decision: ReviewDecision,
        reviewer_id: String,
        edits: Option<String>,
    },
    LogAutoReleased {
        job_id: JobId,
        log: String,
    },
    MethodReviewDecided {
        team_id: TeamId,
        reviewer_id: String,
        approved: bool,
    },
    FinalClosed,
    TestBJobIssued {
        team_id: TeamId,
        source: SubmissionId,
        trained_on: TrainedOn,
        job: JobSpec,
    },
    EvaluationRecorded {
        board: Board,
        job_id: JobId,
        score: ScoreRecord,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub at: Timestamp,
    pub event: Event,
}
