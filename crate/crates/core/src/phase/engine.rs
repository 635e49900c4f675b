use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{
    JobId, JobMode, JobSpec, JobStatus, LogRoute, PhaseTarget, ResourceBudget, SplitName,
    Submission, SubmissionId, SubmissionKind, SubmissionStatus, Team, TeamId, TeamRegistry,
    Timestamp,
};
use crate::metrics::{rank_leaderboard, LeaderboardEntry, TrainedOn};
use crate::review::{ParticipantLog, RedactionPolicy, ReviewDecision, ReviewError, ReviewItem};

use super::events::{Event, EventRecord};
use super::{
    select_finalists, Board, ChallengeConfig, CountdownPolicy, Phase, PhaseError, Round,
    SINGLE_A2_REASON,
};

/// Scores as computed, kept at full precision so that replay is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub auc_severity: f64,
    pub auc_presence: f64,
    pub ci_severity: (f64, f64),
    pub n_eval_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "purpose", rename_all = "snake_case")]
pub enum JobPurpose {
    Rolling,
    A2,
    Round {
        round: Round,
    },
    TestB {
        source: SubmissionId,
        trained_on: TrainedOn,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub spec: JobSpec,
    pub team_id: TeamId,
    pub purpose: JobPurpose,
    pub status: JobStatus,
    pub model_ref: Option<String>,
    pub started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
    pub score: Option<ScoreRecord>,
}

impl JobRecord {
    fn board(&self) -> Option<Board> {
        match self.purpose {
            JobPurpose::Rolling => Some(Board::A1),
            JobPurpose::A2 => Some(Board::A2),
            JobPurpose::TestB { .. } => Some(Board::B),
            JobPurpose::Round { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodReviewStatus {
    Pending,
    Approved,
    Flagged,
}

/// Organizer check that a round2 codebase keeps the round1 method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReview {
    pub round1_submission: SubmissionId,
    pub round2_submission: SubmissionId,
    pub status: MethodReviewStatus,
    pub reviewer_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamPhaseState {
    pub team_id: TeamId,
    pub last_rolling_accepted_at: Option<Timestamp>,
    pub next_allowed_at: Timestamp,
    pub rolling_submissions: Vec<SubmissionId>,
    pub a2_used: bool,
    pub a2_submission: Option<SubmissionId>,
    pub invited: bool,
    pub finalist: bool,
    pub round1_submission: Option<SubmissionId>,
    /// Latest feedback-round submission; the round accepts any number.
    pub feedback_submission: Option<SubmissionId>,
    pub round2_submission: Option<SubmissionId>,
}

impl TeamPhaseState {
    fn new(team_id: TeamId) -> Self {
        Self {
            team_id,
            last_rolling_accepted_at: None,
            next_allowed_at: Timestamp::MIN,
            rolling_submissions: Vec::new(),
            a2_used: false,
            a2_submission: None,
            invited: false,
            finalist: false,
            round1_submission: None,
            feedback_submission: None,
            round2_submission: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RollingOutcome {
    Accepted {
        submission_id: SubmissionId,
        job: JobSpec,
    },
    Rejected {
        next_allowed_at: Timestamp,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAccepted {
    pub submission_id: SubmissionId,
    pub job: JobSpec,
    pub renounced: Option<SubmissionId>,
}

/// The model a finalist is scored with on test B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackChoice {
    pub submission_id: SubmissionId,
    pub model_ref: String,
    pub trained_on: TrainedOn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestBPlan {
    pub jobs: Vec<(TeamId, JobSpec)>,
    /// Finalists with no usable model at all.
    pub excluded: Vec<TeamId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStatus {
    pub phase: Phase,
    pub open_rounds: Vec<Round>,
    pub teams: Vec<TeamPhaseState>,
    pub last_seq: u64,
}

/// Everything derived from the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeState {
    pub config: ChallengeConfig,
    pub phase: Phase,
    pub open_rounds: BTreeSet<Round>,
    pub registry: TeamRegistry,
    pub teams: BTreeMap<TeamId, TeamPhaseState>,
    pub submissions: BTreeMap<SubmissionId, Submission>,
    pub jobs: BTreeMap<JobId, JobRecord>,
    pub review_items: BTreeMap<String, ReviewItem>,
    pub released_logs: BTreeMap<JobId, String>,
    pub method_reviews: BTreeMap<TeamId, MethodReview>,
    pub last_seq: u64,
}

#[derive(Debug, Clone)]
pub struct Challenge {
    state: ChallengeState,
    log: Vec<EventRecord>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Challenge {
    pub fn new(config: ChallengeConfig, now: Timestamp) -> Result<Self, PhaseError> {
        config.validate()?;
        let mut challenge = Self {
            state: ChallengeState {
                config: config.clone(),
                phase: Phase::Qualification,
                open_rounds: BTreeSet::new(),
                registry: TeamRegistry::default(),
                teams: BTreeMap::new(),
                submissions: BTreeMap::new(),
                jobs: BTreeMap::new(),
                review_items: BTreeMap::new(),
                released_logs: BTreeMap::new(),
                method_reviews: BTreeMap::new(),
                last_seq: 0,
            },
            log: Vec::new(),
        };
        challenge.emit(now, Event::ChallengeCreated { config })?;
        Ok(challenge)
    }

    /// Rebuilds a challenge from its records.
    pub fn replay(records: impl IntoIterator<Item = EventRecord>) -> Result<Self, PhaseError> {
        let mut records = records.into_iter();
        let first = records
            .next()
            .ok_or_else(|| PhaseError::Store("empty event log".into()))?;
        let Event::ChallengeCreated { config } = &first.event else {
            return Err(PhaseError::Store(
                "event log does not start with challenge creation".into(),
            ));
        };
        let mut challenge = Self::new(config.clone(), first.at)?;
        if challenge.log[0] != first {
            return Err(PhaseError::Store(
                "challenge creation record does not match".into(),
            ));
        }
        for record in records {
            if record.seq != challenge.state.last_seq + 1 {
                return Err(PhaseError::Store(format!(
                    "sequence gap: expected {}, found {}",
                    challenge.state.last_seq + 1,
                    record.seq
                )));
            }
            challenge.apply(&record)?;
            challenge.log.push(record);
        }
        Ok(challenge)
    }

    pub fn state(&self) -> &ChallengeState {
        &self.state
    }

    pub fn config(&self) -> &ChallengeConfig {
        &self.state.config
    }

    pub fn log(&self) -> &[EventRecord] {
        &self.log
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn phase_status(&self) -> PhaseStatus {
        PhaseStatus {
            phase: self.state.phase,
            open_rounds: self.state.open_rounds.iter().copied().collect(),
            teams: self.state.teams.values().cloned().collect(),
            last_seq: self.state.last_seq,
        }
    }

    pub fn team_state(&self, team_id: &TeamId) -> Option<&TeamPhaseState> {
        self.state.teams.get(team_id)
    }

    pub fn submission(&self, id: &SubmissionId) -> Option<&Submission> {
        self.state.submissions.get(id)
    }

    pub fn job(&self, id: &JobId) -> Option<&JobRecord> {
        self.state.jobs.get(id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.state.jobs.values()
    }

    /// Jobs of a submission, in issue order.
    pub fn jobs_for(&self, submission_id: &SubmissionId) -> Vec<&JobRecord> {
        self.state
            .jobs
            .values()
            .filter(|j| {
                &j.spec.submission_id == submission_id
                    && !matches!(j.purpose, JobPurpose::TestB { .. })
            })
            .collect()
    }

    pub fn review_item(&self, item_id: &str) -> Option<&ReviewItem> {
        self.state.review_items.get(item_id)
    }

    pub fn review_items(&self) -> impl Iterator<Item = &ReviewItem> {
        self.state.review_items.values()
    }

    pub fn method_reviews(&self) -> &BTreeMap<TeamId, MethodReview> {
        &self.state.method_reviews
    }

    pub fn is_organizer(&self, id: &str) -> bool {
        self.state.config.organizers.contains(id)
    }

    fn emit(&mut self, at: Timestamp, event: Event) -> Result<(), PhaseError> {
        let record = EventRecord {
            seq: self.state.last_seq + 1,
            at,
            event,
        };
        self.apply(&record)?;
        self.log.push(record);
        Ok(())
    }

    fn team(&self, team_id: &TeamId) -> Result<&TeamPhaseState, PhaseError> {
        self.state
            .teams
            .get(team_id)
            .ok_or_else(|| PhaseError::UnknownTeam(team_id.clone()))
    }

    fn require_phase(&self, expected: Phase) -> Result<(), PhaseError> {
        if self.state.phase != expected {
            return Err(PhaseError::WrongPhase {
                expected,
                actual: self.state.phase,
            });
        }
        Ok(())
    }

    fn require_organizer(&self, reviewer_id: &str) -> Result<(), PhaseError> {
        if !self.is_organizer(reviewer_id) {
            return Err(ReviewError::Unauthorized(reviewer_id.to_owned()).into());
        }
        Ok(())
    }

    fn next_submission_id(&self) -> SubmissionId {
        SubmissionId::new(format!("sub-{:06}", self.state.submissions.len() + 1))
    }

    #[allow(clippy::too_many_arguments)]
    fn job_spec(
        &self,
        submission_id: &SubmissionId,
        split_name: SplitName,
        budget: ResourceBudget,
        mode: JobMode,
        prepare_split: Option<SplitName>,
        model_ref: Option<String>,
        log_route: LogRoute,
        now: Timestamp,
    ) -> JobSpec {
        JobSpec {
            job_id: JobId::new(format!("job-{:06}", self.state.jobs.len() + 1)),
            submission_id: submission_id.clone(),
            split_name,
            budget,
            seed: splitmix64(self.state.config.seed ^ splitmix64(self.state.last_seq + 1)),
            mode,
            prepare_split,
            model_ref,
            log_route,
            issued_at: now,
        }
    }

    fn require_kind(kind: SubmissionKind, expected: SubmissionKind) -> Result<(), PhaseError> {
        if kind != expected {
            return Err(PhaseError::WrongKind {
                expected,
                got: kind,
            });
        }
        Ok(())
    }

    pub fn register_team(&mut self, team: Team, now: Timestamp) -> Result<(), PhaseError> {
        self.state.registry.check(&team)?;
        self.emit(now, Event::TeamRegistered { team })
    }

    /// Rolling Qualification submission, scored on test A1 when accepted.
    pub fn submit_rolling(
        &mut self,
        team_id: &TeamId,
        kind: SubmissionKind,
        payload_ref: &str,
        now: Timestamp,
    ) -> Result<RollingOutcome, PhaseError> {
        self.require_phase(Phase::Qualification)?;
        let state = self.team(team_id)?;
        Self::require_kind(kind, SubmissionKind::InferenceAlgorithm)?;
        let countdown = self.state.config.countdown_seconds;
        if now >= state.next_allowed_at {
            let submission_id = self.next_submission_id();
            let submission = Submission::new(
                submission_id.clone(),
                team_id.clone(),
                kind,
                PhaseTarget::RollingA1,
                now,
                payload_ref,
            );
            let job = self.job_spec(
                &submission_id,
                SplitName::TestA1,
                self.state.config.inference_budget,
                JobMode::Infer,
                Some(SplitName::TrainingA),
                None,
                LogRoute::Withheld,
                now,
            );
            self.emit(
                now,
                Event::RollingAccepted {
                    submission,
                    job: job.clone(),
                    next_allowed_at: now.saturating_add(countdown),
                },
            )?;
            Ok(RollingOutcome::Accepted { submission_id, job })
        } else {
            let next_allowed_at = match self.state.config.countdown_policy {
                CountdownPolicy::RemainingRestart => now + (state.next_allowed_at - now),
                CountdownPolicy::FullPenalty => now.saturating_add(countdown),
            };
            self.emit(
                now,
                Event::RollingRejected {
                    team_id: team_id.clone(),
                    next_allowed_at,
                },
            )?;
            Ok(RollingOutcome::Rejected { next_allowed_at })
        }
    }

    /// The one-shot A2 submission. A second attempt is recorded and refused.
    pub fn submit_a2(
        &mut self,
        team_id: &TeamId,
        kind: SubmissionKind,
        payload_ref: &str,
        now: Timestamp,
    ) -> Result<(SubmissionId, JobSpec), PhaseError> {
        self.require_phase(Phase::Qualification)?;
        let state = self.team(team_id)?;
        Self::require_kind(kind, SubmissionKind::InferenceAlgorithm)?;
        if state.a2_used {
            self.emit(
                now,
                Event::A2Rejected {
                    team_id: team_id.clone(),
                    reason: SINGLE_A2_REASON.to_owned(),
                },
            )?;
            return Err(PhaseError::SingleSubmission(SINGLE_A2_REASON.to_owned()));
        }
        let submission_id = self.next_submission_id();
        let submission = Submission::new(
            submission_id.clone(),
            team_id.clone(),
            kind,
            PhaseTarget::FinalA2,
            now,
            payload_ref,
        );
        let job = self.job_spec(
            &submission_id,
            SplitName::TestA2,
            self.state.config.inference_budget,
            JobMode::Infer,
            Some(SplitName::TrainingA),
            None,
            LogRoute::Withheld,
            now,
        );
        self.emit(
            now,
            Event::A2Accepted {
                submission,
                job: job.clone(),
            },
        )?;
        Ok((submission_id, job))
    }

    fn unsettled_jobs(&self, filter: impl Fn(&JobRecord) -> bool) -> Vec<JobId> {
        self.state
            .jobs
            .values()
            .filter(|j| filter(j))
            .filter(|j| {
                !j.status.is_terminal()
                    || (j.status == JobStatus::Completed
                        && j.board().is_some()
                        && j.score.is_none())
            })
            .map(|j| j.spec.job_id.clone())
            .collect()
    }

    /// Closes Qualification and invites teams down the A2 board until
    /// `n_finalists` accept. Opens round 1.
    pub fn close_qualification(
        &mut self,
        accepts: impl FnMut(&TeamId) -> bool,
        now: Timestamp,
    ) -> Result<Vec<TeamId>, PhaseError> {
        self.require_phase(Phase::Qualification)?;
        let pending =
            self.unsettled_jobs(|j| matches!(j.purpose, JobPurpose::Rolling | JobPurpose::A2));
        if !pending.is_empty() {
            return Err(PhaseError::JobsInFlight(pending));
        }
        let board = self.leaderboard(Board::A2);
        let (invited, finalists) = select_finalists(&board, accepts, self.state.config.n_finalists);
        self.emit(
            now,
            Event::QualificationClosed {
                invited,
                finalists: finalists.clone(),
            },
        )?;
        Ok(finalists)
    }

    pub fn open_round(&mut self, round: Round, now: Timestamp) -> Result<(), PhaseError> {
        self.require_phase(Phase::Final)?;
        if self.state.open_rounds.contains(&round) {
            return Ok(());
        }
        self.emit(now, Event::RoundOpened { round })
    }

    pub fn close_round(&mut self, round: Round, now: Timestamp) -> Result<(), PhaseError> {
        self.require_phase(Phase::Final)?;
        if !self.state.open_rounds.contains(&round) {
            return Ok(());
        }
        self.emit(now, Event::RoundClosed { round })
    }

    pub fn submit_final(
        &mut self,
        team_id: &TeamId,
        round: Round,
        kind: SubmissionKind,
        payload_ref: &str,
        confirm_renounce: bool,
        now: Timestamp,
    ) -> Result<FinalAccepted, PhaseError> {
        self.require_phase(Phase::Final)?;
        let state = self.team(team_id)?;
        if !state.finalist {
            return Err(PhaseError::NotFinalist(team_id.clone()));
        }
        Self::require_kind(kind, SubmissionKind::TrainingCodebase)?;
        if !self.state.open_rounds.contains(&round) {
            return Err(PhaseError::RoundNotOpen(round));
        }
        if let Some(&deadline) = self.state.config.round_deadlines.get(&round) {
            if now > deadline {
                return Err(PhaseError::DeadlinePassed { round, deadline });
            }
        }
        let mut renounced = None;
        match round {
            Round::Round1 => {
                if state.round1_submission.is_some() {
                    return Err(PhaseError::SingleSubmission(
                        "round1 accepts a single code base".into(),
                    ));
                }
            }
            Round::Feedback => {}
            Round::Round2 => {
                if state.round2_submission.is_some() {
                    return Err(PhaseError::SingleSubmission(
                        "round2 accepts a single code base".into(),
                    ));
                }
                if !confirm_renounce {
                    return Err(PhaseError::ConfirmationRequired);
                }
                let round1 = state
                    .round1_submission
                    .clone()
                    .ok_or_else(|| PhaseError::Round1Missing(team_id.clone()))?;
                if !self.state.submissions[&round1].status.is_terminal() {
                    return Err(PhaseError::Round1InFlight(team_id.clone()));
                }
                renounced = Some(round1);
            }
        }
        let config = &self.state.config;
        let (target, split, budget, route) = match round {
            Round::Round1 => (
                PhaseTarget::FtRound1,
                SplitName::TrainingB,
                config.round1_budget,
                LogRoute::Review,
            ),
            Round::Feedback => (
                PhaseTarget::FtFeedback,
                config.feedback_split,
                config.feedback_budget,
                LogRoute::FullRelease,
            ),
            Round::Round2 => (
                PhaseTarget::FtRound2,
                SplitName::TrainingB,
                config.round1_budget,
                LogRoute::Review,
            ),
        };
        let submission_id = self.next_submission_id();
        let submission = Submission::new(
            submission_id.clone(),
            team_id.clone(),
            kind,
            target,
            now,
            payload_ref,
        );
        let job = self.job_spec(
            &submission_id,
            split,
            budget,
            JobMode::Train,
            None,
            None,
            route,
            now,
        );
        self.emit(
            now,
            Event::FinalSubmissionAccepted {
                round,
                submission,
                job: job.clone(),
                renounced: renounced.clone(),
            },
        )?;
        Ok(FinalAccepted {
            submission_id,
            job,
            renounced,
        })
    }

    fn job_mut_check(&self, job_id: &JobId) -> Result<&JobRecord, PhaseError> {
        self.state
            .jobs
            .get(job_id)
            .ok_or_else(|| PhaseError::UnknownJob(job_id.clone()))
    }

    fn job_error(job_id: &JobId, message: &str) -> PhaseError {
        PhaseError::JobState {
            job: job_id.clone(),
            message: message.to_owned(),
        }
    }

    pub fn start_job(&mut self, job_id: &JobId, now: Timestamp) -> Result<(), PhaseError> {
        let job = self.job_mut_check(job_id)?;
        if job.status != JobStatus::Queued {
            return Err(Self::job_error(job_id, "already started"));
        }
        self.emit(
            now,
            Event::JobStarted {
                job_id: job_id.clone(),
            },
        )
    }

    /// Records the single terminal event of a job.
    pub fn finish_job(
        &mut self,
        job_id: &JobId,
        status: JobStatus,
        model_ref: Option<String>,
        now: Timestamp,
    ) -> Result<(), PhaseError> {
        let job = self.job_mut_check(job_id)?;
        if !status.is_terminal() {
            return Err(Self::job_error(job_id, "finish needs a terminal status"));
        }
        match job.status {
            JobStatus::Running => {}
            JobStatus::Queued => return Err(Self::job_error(job_id, "not started")),
            _ => return Err(Self::job_error(job_id, "already finished")),
        }
        self.emit(
            now,
            Event::JobFinished {
                job_id: job_id.clone(),
                status,
                model_ref,
            },
        )
    }

    pub fn record_score(
        &mut self,
        job_id: &JobId,
        score: ScoreRecord,
        now: Timestamp,
    ) -> Result<(), PhaseError> {
        let job = self.job_mut_check(job_id)?;
        let board = job
            .board()
            .ok_or_else(|| Self::job_error(job_id, "training jobs are not scored"))?;
        if job.status != JobStatus::Completed {
            return Err(Self::job_error(job_id, "only completed jobs are scored"));
        }
        if job.score.is_some() {
            return Err(Self::job_error(job_id, "already scored"));
        }
        self.emit(
            now,
            Event::EvaluationRecorded {
                board,
                job_id: job_id.clone(),
                score,
            },
        )
    }

    /// Queues the log of a finished sequestered training job for review.
    pub fn create_review_item(
        &mut self,
        job_id: &JobId,
        raw_log: String,
        policy: &RedactionPolicy,
        now: Timestamp,
    ) -> Result<String, PhaseError> {
        let job = self.job_mut_check(job_id)?;
        if job.spec.log_route != LogRoute::Review {
            return Err(Self::job_error(job_id, "log is not routed to review"));
        }
        if !job.status.is_terminal() {
            return Err(Self::job_error(job_id, "still running"));
        }
        if self
            .state
            .review_items
            .values()
            .any(|i| &i.job_id == job_id)
        {
            return Err(Self::job_error(job_id, "already queued for review"));
        }
        let item_id = format!("rev-{:06}", self.state.review_items.len() + 1);
        let item = ReviewItem::new(
            item_id.clone(),
            job_id.clone(),
            job.team_id.clone(),
            raw_log,
            policy,
        );
        self.emit(now, Event::ReviewItemCreated { item })?;
        Ok(item_id)
    }

    pub fn decide_review(
        &mut self,
        item_id: &str,
        decision: ReviewDecision,
        reviewer_id: &str,
        edits: Option<String>,
        now: Timestamp,
    ) -> Result<&ReviewItem, PhaseError> {
        self.require_organizer(reviewer_id)?;
        let item = self
            .state
            .review_items
            .get(item_id)
            .ok_or_else(|| ReviewError::NotFound(item_id.to_owned()))?;
        if item.status != crate::review::ReviewStatus::Pending {
            return Err(ReviewError::AlreadyDecided(item_id.to_owned()).into());
        }
        self.emit(
            now,
            Event::ReviewDecided {
                item_id: item_id.to_owned(),
                decision,
                reviewer_id: reviewer_id.to_owned(),
                edits,
            },
        )?;
        Ok(&self.state.review_items[item_id])
    }

    /// Hands the complete log of a public-data training job to the team.
    pub fn release_full_log(
        &mut self,
        job_id: &JobId,
        log: String,
        now: Timestamp,
    ) -> Result<(), PhaseError> {
        let job = self.job_mut_check(job_id)?;
        if job.spec.log_route != LogRoute::FullRelease || job.spec.split_name.is_sequestered() {
            return Err(Self::job_error(job_id, "log is not released automatically"));
        }
        if !job.status.is_terminal() {
            return Err(Self::job_error(job_id, "still running"));
        }
        if self.state.released_logs.contains_key(job_id) {
            return Err(Self::job_error(job_id, "log already released"));
        }
        self.emit(
            now,
            Event::LogAutoReleased {
                job_id: job_id.clone(),
                log,
            },
        )
    }

    pub fn decide_method_review(
        &mut self,
        team_id: &TeamId,
        reviewer_id: &str,
        approved: bool,
        now: Timestamp,
    ) -> Result<(), PhaseError> {
        self.require_organizer(reviewer_id)?;
        let review = self
            .state
            .method_reviews
            .get(team_id)
            .ok_or_else(|| ReviewError::NotFound(format!("method review of {team_id}")))?;
        if review.status != MethodReviewStatus::Pending {
            return Err(ReviewError::AlreadyDecided(format!("method review of {team_id}")).into());
        }
        self.emit(
            now,
            Event::MethodReviewDecided {
                team_id: team_id.clone(),
                reviewer_id: reviewer_id.to_owned(),
                approved,
            },
        )
    }

    /// What the owning team sees of a job's log.
    pub fn participant_log(&self, job_id: &JobId) -> Option<ParticipantLog> {
        let job = self.state.jobs.get(job_id)?;
        Some(match job.spec.log_route {
            LogRoute::Review => self
                .state
                .review_items
                .values()
                .find(|i| &i.job_id == job_id)
                .map_or(ParticipantLog::PendingReview, ReviewItem::participant_view),
            LogRoute::FullRelease => match self.state.released_logs.get(job_id) {
                Some(log) => ParticipantLog::Full { log: log.clone() },
                None => ParticipantLog::PendingReview,
            },
            LogRoute::Withheld => ParticipantLog::None,
        })
    }

    fn completed_model(&self, submission_id: &SubmissionId) -> Option<String> {
        self.jobs_for(submission_id)
            .into_iter()
            .find(|j| j.status == JobStatus::Completed)
            .and_then(|j| j.model_ref.clone())
    }

    /// The model a finalist is scored with on test B: the surviving Final
    /// submission when its training completed, else the Qualification model.
    pub fn fallback_policy(&self, team_id: &TeamId) -> Option<FallbackChoice> {
        let state = self.state.teams.get(team_id)?;
        if !state.finalist {
            return None;
        }
        let final_submission = state
            .round2_submission
            .as_ref()
            .or(state.round1_submission.as_ref());
        if let Some(sub) = final_submission {
            if self.state.submissions[sub].status == SubmissionStatus::Completed {
                if let Some(model_ref) = self.completed_model(sub) {
                    return Some(FallbackChoice {
                        submission_id: sub.clone(),
                        model_ref,
                        trained_on: TrainedOn::B,
                    });
                }
            }
        }
        let qualification = state
            .a2_submission
            .iter()
            .chain(state.rolling_submissions.iter().rev());
        for sub in qualification {
            if let Some(model_ref) = self.completed_model(sub) {
                return Some(FallbackChoice {
                    submission_id: sub.clone(),
                    model_ref,
                    trained_on: TrainedOn::A,
                });
            }
        }
        None
    }

    /// Closes the Final phase and issues one test-B scoring job per finalist.
    pub fn close_final(&mut self, now: Timestamp) -> Result<TestBPlan, PhaseError> {
        self.require_phase(Phase::Final)?;
        let pending = self.unsettled_jobs(|j| matches!(j.purpose, JobPurpose::Round { .. }));
        if !pending.is_empty() {
            return Err(PhaseError::JobsInFlight(pending));
        }
        self.emit(now, Event::FinalClosed)?;
        let finalists: Vec<TeamId> = self
            .state
            .teams
            .values()
            .filter(|t| t.finalist)
            .map(|t| t.team_id.clone())
            .collect();
        let mut plan = TestBPlan {
            jobs: Vec::new(),
            excluded: Vec::new(),
        };
        for team_id in finalists {
            let Some(choice) = self.fallback_policy(&team_id) else {
                plan.excluded.push(team_id);
                continue;
            };
            let job = self.job_spec(
                &choice.submission_id,
                SplitName::TestB,
                self.state.config.inference_budget,
                JobMode::Infer,
                None,
                Some(choice.model_ref.clone()),
                LogRoute::Withheld,
                now,
            );
            self.emit(
                now,
                Event::TestBJobIssued {
                    team_id: team_id.clone(),
                    source: choice.submission_id,
                    trained_on: choice.trained_on,
                    job: job.clone(),
                },
            )?;
            plan.jobs.push((team_id, job));
        }
        Ok(plan)
    }

    /// Ranked board. A1 keeps each team's best entry; A2 and B hold one
    /// entry per team by construction.
    pub fn leaderboard(&self, board: Board) -> Vec<LeaderboardEntry> {
        let mut best: BTreeMap<TeamId, LeaderboardEntry> = BTreeMap::new();
        for job in self.state.jobs.values() {
            let (Some(score), Some(b)) = (&job.score, job.board()) else {
                continue;
            };
            if b != board {
                continue;
            }
            let submission = &self.state.submissions[&job.spec.submission_id];
            let entry = LeaderboardEntry {
                rank: 0,
                team_id: job.team_id.clone(),
                submission_id: submission.submission_id.clone(),
                auc_severity: score.auc_severity,
                auc_presence: score.auc_presence,
                ci_severity: score.ci_severity,
                submitted_at: submission.submitted_at,
                trained_on: match &job.purpose {
                    JobPurpose::TestB { trained_on, .. } => Some(*trained_on),
                    _ => None,
                },
            };
            match best.get(&job.team_id) {
                Some(current)
                    if current.auc_severity > entry.auc_severity
                        || (current.auc_severity == entry.auc_severity
                            && current.submitted_at <= entry.submitted_at) => {}
                _ => {
                    best.insert(job.team_id.clone(), entry);
                }
            }
        }
        rank_leaderboard(best.into_values().collect())
    }

    fn insert_job(&mut self, job: &JobSpec, team_id: &TeamId, purpose: JobPurpose) {
        self.state.jobs.insert(
            job.job_id.clone(),
            JobRecord {
                spec: job.clone(),
                team_id: team_id.clone(),
                purpose,
                status: JobStatus::Queued,
                model_ref: None,
                started_at: None,
                finished_at: None,
                score: None,
            },
        );
    }

    fn team_mut(&mut self, team_id: &TeamId) -> Result<&mut TeamPhaseState, PhaseError> {
        self.state
            .teams
            .get_mut(team_id)
            .ok_or_else(|| PhaseError::UnknownTeam(team_id.clone()))
    }

    fn apply(&mut self, record: &EventRecord) -> Result<(), PhaseError> {
        let at = record.at;
        match &record.event {
            Event::ChallengeCreated { .. } => {}
            Event::TeamRegistered { team } => {
                self.state.registry.add(team.clone())?;
                self.state.teams.insert(
                    team.team_id.clone(),
                    TeamPhaseState::new(team.team_id.clone()),
                );
            }
            Event::RollingAccepted {
                submission,
                job,
                next_allowed_at,
            } => {
                let state = self.team_mut(&submission.team_id)?;
                state.last_rolling_accepted_at = Some(submission.submitted_at);
                state.next_allowed_at = *next_allowed_at;
                state
                    .rolling_submissions
                    .push(submission.submission_id.clone());
                self.insert_job(job, &submission.team_id, JobPurpose::Rolling);
                self.state
                    .submissions
                    .insert(submission.submission_id.clone(), submission.clone());
            }
            Event::RollingRejected {
                team_id,
                next_allowed_at,
            } => {
                self.team_mut(team_id)?.next_allowed_at = *next_allowed_at;
            }
            Event::A2Accepted { submission, job } => {
                let state = self.team_mut(&submission.team_id)?;
                if state.a2_used {
                    return Err(PhaseError::SingleSubmission(SINGLE_A2_REASON.to_owned()));
                }
                state.a2_used = true;
                state.a2_submission = Some(submission.submission_id.clone());
                self.insert_job(job, &submission.team_id, JobPurpose::A2);
                self.state
                    .submissions
                    .insert(submission.submission_id.clone(), submission.clone());
            }
            Event::A2Rejected { .. } => {}
            Event::QualificationClosed { invited, finalists } => {
                for team in invited {
                    self.team_mut(team)?.invited = true;
                }
                for team in finalists {
                    self.team_mut(team)?.finalist = true;
                }
                self.state.phase = Phase::Final;
                self.state.open_rounds.insert(Round::Round1);
            }
            Event::RoundOpened { round } => {
                self.state.open_rounds.insert(*round);
            }
            Event::RoundClosed { round } => {
                self.state.open_rounds.remove(round);
            }
            Event::FinalSubmissionAccepted {
                round,
                submission,
                job,
                renounced,
            } => {
                let team_id = submission.team_id.clone();
                let sub_id = submission.submission_id.clone();
                let state = self.team_mut(&team_id)?;
                match round {
                    Round::Round1 => state.round1_submission = Some(sub_id.clone()),
                    Round::Feedback => state.feedback_submission = Some(sub_id.clone()),
                    Round::Round2 => state.round2_submission = Some(sub_id.clone()),
                }
                if let Some(old) = renounced {
                    self.state
                        .submissions
                        .get_mut(old)
                        .ok_or_else(|| PhaseError::UnknownSubmission(old.clone()))?
                        .transition(SubmissionStatus::Renounced)?;
                    self.state.method_reviews.insert(
                        team_id.clone(),
                        MethodReview {
                            round1_submission: old.clone(),
                            round2_submission: sub_id.clone(),
                            status: MethodReviewStatus::Pending,
                            reviewer_id: None,
                        },
                    );
                }
                self.insert_job(job, &team_id, JobPurpose::Round { round: *round });
                self.state.submissions.insert(sub_id, submission.clone());
            }
            Event::JobStarted { job_id } => {
                let job = self
                    .state
                    .jobs
                    .get_mut(job_id)
                    .ok_or_else(|| PhaseError::UnknownJob(job_id.clone()))?;
                job.status = JobStatus::Running;
                job.started_at = Some(at);
                if !matches!(job.purpose, JobPurpose::TestB { .. }) {
                    let sub = job.spec.submission_id.clone();
                    self.state
                        .submissions
                        .get_mut(&sub)
                        .ok_or(PhaseError::UnknownSubmission(sub))?
                        .transition(SubmissionStatus::Running)?;
                }
            }
            Event::JobFinished {
                job_id,
                status,
                model_ref,
            } => {
                let job = self
                    .state
                    .jobs
                    .get_mut(job_id)
                    .ok_or_else(|| PhaseError::UnknownJob(job_id.clone()))?;
                if job.status.is_terminal() {
                    return Err(Self::job_error(job_id, "already finished"));
                }
                job.status = *status;
                job.model_ref = model_ref.clone();
                job.finished_at = Some(at);
                if !matches!(job.purpose, JobPurpose::TestB { .. }) {
                    let to = if *status == JobStatus::Completed {
                        SubmissionStatus::Completed
                    } else {
                        SubmissionStatus::Failed
                    };
                    let sub = job.spec.submission_id.clone();
                    self.state
                        .submissions
                        .get_mut(&sub)
                        .ok_or(PhaseError::UnknownSubmission(sub))?
                        .transition(to)?;
                }
            }
            Event::ReviewItemCreated { item } => {
                self.state
                    .review_items
                    .insert(item.item_id.clone(), item.clone());
            }
            Event::ReviewDecided {
                item_id,
                decision,
                reviewer_id,
                edits,
            } => {
                self.state
                    .review_items
                    .get_mut(item_id)
                    .ok_or_else(|| ReviewError::NotFound(item_id.clone()))?
                    .decide(*decision, reviewer_id, edits.clone(), at)?;
            }
            Event::LogAutoReleased { job_id, log } => {
                self.state.released_logs.insert(job_id.clone(), log.clone());
            }
            Event::MethodReviewDecided {
                team_id,
                reviewer_id,
                approved,
            } => {
                let review =
                    self.state.method_reviews.get_mut(team_id).ok_or_else(|| {
                        ReviewError::NotFound(format!("method review of {team_id}"))
                    })?;
                review.status = if *approved {
                    MethodReviewStatus::Approved
                } else {
                    MethodReviewStatus::Flagged
                };
                review.reviewer_id = Some(reviewer_id.clone());
            }
            Event::FinalClosed => {
                self.state.phase = Phase::Closed;
                self.state.open_rounds.clear();
            }
            Event::TestBJobIssued {
                team_id,
                source,
                trained_on,
                job,
            } => {
                self.insert_job(
                    job,
                    team_id,
                    JobPurpose::TestB {
                        source: source.clone(),
                        trained_on: *trained_on,
                    },
                );
            }
            Event::EvaluationRecorded { job_id, score, .. } => {
                self.state
                    .jobs
                    .get_mut(job_id)
                    .ok_or_else(|| PhaseError::UnknownJob(job_id.clone()))?
                    .score = Some(score.clone());
            }
        }
        self.state.last_seq = record.seq;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;
    use crate::domain::ParticipantId;

    const DAY: i64 = 86_400;
    const INFER: SubmissionKind = SubmissionKind::InferenceAlgorithm;
    const TRAIN: SubmissionKind = SubmissionKind::TrainingCodebase;

    fn team(id: &str) -> Team {
        Team {
            team_id: id.into(),
            member_ids: BTreeSet::from([ParticipantId::new(format!("{id}-member"))]),
            display_name: id.to_uppercase(),
        }
    }

    fn challenge_with(teams: &[&str]) -> Challenge {
        let mut c = Challenge::new(ChallengeConfig::default(), 0).unwrap();
        for t in teams {
            c.register_team(team(t), 0).unwrap();
        }
        c
    }

    fn score(sev: f64) -> ScoreRecord {
        ScoreRecord {
            auc_severity: sev,
            auc_presence: 0.5,
            ci_severity: (sev - 0.1, sev + 0.1),
            n_eval_cases: 10,
        }
    }

    fn run(c: &mut Challenge, job: &JobId, status: JobStatus, now: Timestamp) {
        c.start_job(job, now).unwrap();
        let model = (status == JobStatus::Completed).then(|| format!("model-{job}"));
        c.finish_job(job, status, model, now).unwrap();
    }

    fn t(id: &str) -> TeamId {
        TeamId::new(id)
    }

    /// Qualification with every team scored on A2, closed with all accepting.
    fn into_final(teams: &[&str]) -> Challenge {
        let mut c = challenge_with(teams);
        for (i, name) in teams.iter().enumerate() {
            let (_, job) = c.submit_a2(&t(name), INFER, "constant", 10).unwrap();
            run(&mut c, &job.job_id, JobStatus::Completed, 20);
            c.record_score(&job.job_id, score(0.9 - i as f64 * 0.01), 30)
                .unwrap();
        }
        c.close_qualification(|_| true, 100).unwrap();
        c
    }

    #[test]
    fn fresh_challenge_status() {
        let c = challenge_with(&[]);
        let s = c.phase_status();
        assert_eq!(s.phase, Phase::Qualification);
        assert!(s.open_rounds.is_empty());
        assert!(s.teams.iter().all(|t| !t.finalist));
    }

    #[test]
    fn countdown_examples() {
        let mut c = challenge_with(&["a"]);
        let a = t("a");
        match c.submit_rolling(&a, INFER, "noise", 0).unwrap() {
            RollingOutcome::Accepted { .. } => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(c.team_state(&a).unwrap().next_allowed_at, 604_800);
        assert_eq!(
            c.submit_rolling(&a, INFER, "noise", 432_000).unwrap(),
            RollingOutcome::Rejected {
                next_allowed_at: 604_800
            }
        );
        assert!(matches!(
            c.submit_rolling(&a, INFER, "noise", 604_800).unwrap(),
            RollingOutcome::Accepted { .. }
        ));
    }

    #[test]
    fn full_penalty_policy() {
        let cfg = ChallengeConfig {
            countdown_policy: CountdownPolicy::FullPenalty,
            ..ChallengeConfig::default()
        };
        let mut c = Challenge::new(cfg, 0).unwrap();
        c.register_team(team("a"), 0).unwrap();
        c.submit_rolling(&t("a"), INFER, "noise", 0).unwrap();
        assert_eq!(
            c.submit_rolling(&t("a"), INFER, "noise", 5 * DAY).unwrap(),
            RollingOutcome::Rejected {
                next_allowed_at: 12 * DAY
            }
        );
    }

    #[test]
    fn rolling_requires_inference_algorithm() {
        let mut c = challenge_with(&["a"]);
        assert!(matches!(
            c.submit_rolling(&t("a"), TRAIN, "x", 0),
            Err(PhaseError::WrongKind { .. })
        ));
        assert!(matches!(
            c.submit_rolling(&t("zz"), INFER, "x", 0),
            Err(PhaseError::UnknownTeam(_))
        ));
    }

    #[test]
    fn a2_is_one_shot() {
        let mut c = challenge_with(&["a"]);
        let (_, job) = c.submit_a2(&t("a"), INFER, "constant", 0).unwrap();
        assert_eq!(job.split_name, SplitName::TestA2);
        assert_eq!(job.prepare_split, Some(SplitName::TrainingA));
        let err = c.submit_a2(&t("a"), INFER, "constant", 1).unwrap_err();
        assert_eq!(err, PhaseError::SingleSubmission(SINGLE_A2_REASON.into()));
        assert!(c.team_state(&t("a")).unwrap().a2_used);
    }

    #[test]
    fn qualification_close_selects_and_opens_round1() {
        let c = into_final(&["a", "b", "c"]);
        let s = c.phase_status();
        assert_eq!(s.phase, Phase::Final);
        assert_eq!(s.open_rounds, vec![Round::Round1]);
        assert!(s.teams.iter().all(|t| t.finalist));
    }

    #[test]
    fn qualification_close_waits_for_scores() {
        let mut c = challenge_with(&["a"]);
        let (_, job) = c.submit_a2(&t("a"), INFER, "constant", 0).unwrap();
        assert!(matches!(
            c.close_qualification(|_| true, 1),
            Err(PhaseError::JobsInFlight(_))
        ));
        run(&mut c, &job.job_id, JobStatus::Completed, 2);
        assert!(c.close_qualification(|_| true, 3).is_err());
        c.record_score(&job.job_id, score(0.7), 4).unwrap();
        c.close_qualification(|_| true, 5).unwrap();
    }

    #[test]
    fn final_round_rules() {
        let mut c = into_final(&["a", "b"]);
        let a = t("a");
        let r1 = c
            .submit_final(&a, Round::Round1, TRAIN, "logistic", false, 200)
            .unwrap();
        assert_eq!(r1.job.split_name, SplitName::TrainingB);
        assert_eq!(r1.job.budget.wall_clock_limit.as_secs(), 432_000);
        assert_eq!(r1.job.log_route, LogRoute::Review);
        assert!(matches!(
            c.submit_final(&a, Round::Round1, TRAIN, "logistic", false, 201),
            Err(PhaseError::SingleSubmission(_))
        ));
        assert_eq!(
            c.submit_final(&a, Round::Feedback, TRAIN, "logistic", false, 202)
                .unwrap_err(),
            PhaseError::RoundNotOpen(Round::Feedback)
        );
        c.open_round(Round::Feedback, 203).unwrap();
        let fb = c
            .submit_final(&a, Round::Feedback, TRAIN, "logistic", false, 204)
            .unwrap();
        assert_eq!(fb.job.split_name, SplitName::TrainingA);
        assert_eq!(fb.job.budget.wall_clock_limit.as_secs(), 86_400);
        assert_eq!(fb.job.log_route, LogRoute::FullRelease);
        c.submit_final(&a, Round::Feedback, TRAIN, "noise", false, 205)
            .unwrap();

        c.open_round(Round::Round2, 206).unwrap();
        assert_eq!(
            c.submit_final(&a, Round::Round2, TRAIN, "logistic", false, 207)
                .unwrap_err(),
            PhaseError::ConfirmationRequired
        );
        assert_eq!(
            c.submit_final(&a, Round::Round2, TRAIN, "logistic", true, 207)
                .unwrap_err(),
            PhaseError::Round1InFlight(a.clone())
        );
        assert_eq!(
            c.submit_final(&t("b"), Round::Round2, TRAIN, "logistic", true, 207)
                .unwrap_err(),
            PhaseError::Round1Missing(t("b"))
        );
        run(&mut c, &r1.job.job_id, JobStatus::Failed, 208);
        let r2 = c
            .submit_final(&a, Round::Round2, TRAIN, "logistic", true, 209)
            .unwrap();
        assert_eq!(r2.renounced.as_ref(), Some(&r1.submission_id));
        assert_eq!(
            c.submission(&r1.submission_id).unwrap().status,
            SubmissionStatus::Renounced
        );
        assert_eq!(c.method_reviews()[&a].status, MethodReviewStatus::Pending);
        assert!(matches!(
            c.submit_final(&a, Round::Round2, TRAIN, "logistic", true, 210),
            Err(PhaseError::SingleSubmission(_))
        ));
    }

    #[test]
    fn non_finalists_and_deadlines() {
        let mut cfg = ChallengeConfig {
            n_finalists: 1,
            ..ChallengeConfig::default()
        };
        cfg.round_deadlines.insert(Round::Round1, 500);
        let mut c = Challenge::new(cfg, 0).unwrap();
        for name in ["a", "b"] {
            c.register_team(team(name), 0).unwrap();
        }
        for (name, sev) in [("a", 0.9), ("b", 0.8)] {
            let (_, job) = c.submit_a2(&t(name), INFER, "constant", 1).unwrap();
            run(&mut c, &job.job_id, JobStatus::Completed, 2);
            c.record_score(&job.job_id, score(sev), 3).unwrap();
        }
        assert_eq!(c.close_qualification(|_| true, 10).unwrap(), vec![t("a")]);
        assert_eq!(
            c.submit_final(&t("b"), Round::Round1, TRAIN, "x", false, 20)
                .unwrap_err(),
            PhaseError::NotFinalist(t("b"))
        );
        assert_eq!(
            c.submit_final(&t("a"), Round::Round1, TRAIN, "x", false, 501)
                .unwrap_err(),
            PhaseError::DeadlinePassed {
                round: Round::Round1,
                deadline: 500
            }
        );
        c.submit_final(&t("a"), Round::Round1, TRAIN, "x", false, 500)
            .unwrap();
    }

    #[test]
    fn jobs_have_exactly_one_terminal_event() {
        let mut c = challenge_with(&["a"]);
        let (_, job) = c.submit_a2(&t("a"), INFER, "constant", 0).unwrap();
        let id = job.job_id;
        assert!(c.finish_job(&id, JobStatus::Failed, None, 1).is_err());
        c.start_job(&id, 1).unwrap();
        assert!(c.start_job(&id, 1).is_err());
        assert!(c.finish_job(&id, JobStatus::Running, None, 2).is_err());
        c.finish_job(&id, JobStatus::TimedOut, None, 2).unwrap();
        assert!(c.finish_job(&id, JobStatus::Completed, None, 3).is_err());
        let terminal = c
            .log()
            .iter()
            .filter(|r| matches!(&r.event, Event::JobFinished { job_id, .. } if job_id == &id))
            .count();
        assert_eq!(terminal, 1);
        assert!(c.record_score(&id, score(0.5), 4).is_err());
    }

    #[test]
    fn fallback_uses_qualification_model_when_final_jobs_fail() {
        let mut c = into_final(&["a", "b", "c"]);
        // a: round1 completes; b: round1 and round2 fail; c: never submits in Final
        let a1 = c
            .submit_final(&t("a"), Round::Round1, TRAIN, "logistic", false, 200)
            .unwrap();
        run(&mut c, &a1.job.job_id, JobStatus::Completed, 201);
        let b1 = c
            .submit_final(&t("b"), Round::Round1, TRAIN, "fail", false, 200)
            .unwrap();
        run(&mut c, &b1.job.job_id, JobStatus::Failed, 201);
        c.open_round(Round::Round2, 202).unwrap();
        let b2 = c
            .submit_final(&t("b"), Round::Round2, TRAIN, "fail", true, 203)
            .unwrap();
        run(&mut c, &b2.job.job_id, JobStatus::QuotaExceeded, 204);

        assert_eq!(c.fallback_policy(&t("a")).unwrap().trained_on, TrainedOn::B);
        let b = c.fallback_policy(&t("b")).unwrap();
        assert_eq!(b.trained_on, TrainedOn::A);
        assert_eq!(
            Some(&b.submission_id),
            c.team_state(&t("b")).unwrap().a2_submission.as_ref()
        );
        assert_eq!(c.fallback_policy(&t("c")).unwrap().trained_on, TrainedOn::A);
        assert_eq!(c.fallback_policy(&t("nobody")), None);

        let plan = c.close_final(300).unwrap();
        assert_eq!(plan.jobs.len(), 3);
        assert!(plan.excluded.is_empty());
        for (i, (_, job)) in plan.jobs.iter().enumerate() {
            assert_eq!(job.split_name, SplitName::TestB);
            run(&mut c, &job.job_id, JobStatus::Completed, 301);
            c.record_score(&job.job_id, score(0.7 + i as f64 * 0.01), 302)
                .unwrap();
        }
        let board = c.leaderboard(Board::B);
        let tag = |name: &str| {
            board
                .iter()
                .find(|e| e.team_id.as_str() == name)
                .unwrap()
                .trained_on
        };
        assert_eq!(tag("a"), Some(TrainedOn::B));
        assert_eq!(tag("b"), Some(TrainedOn::A));
        assert_eq!(board[0].team_id.as_str(), "c");
    }

    #[test]
    fn non_finalist_excluded_from_final_board() {
        let mut c = challenge_with(&["a", "b"]);
        let (_, job) = c.submit_a2(&t("a"), INFER, "constant", 0).unwrap();
        run(&mut c, &job.job_id, JobStatus::Completed, 1);
        c.record_score(&job.job_id, score(0.8), 2).unwrap();
        let rolling = match c.submit_rolling(&t("b"), INFER, "constant", 0).unwrap() {
            RollingOutcome::Accepted { job, .. } => job,
            other => panic!("{other:?}"),
        };
        run(&mut c, &rolling.job_id, JobStatus::Completed, 1);
        c.record_score(&rolling.job_id, score(0.9), 2).unwrap();
        c.close_qualification(|_| true, 10).unwrap();
        let plan = c.close_final(20).unwrap();
        assert_eq!(plan.jobs.len(), 1);
        assert_eq!(plan.jobs[0].0, t("a"));
    }

    #[test]
    fn review_items_and_logs() {
        let mut c = into_final(&["a"]);
        let r1 = c
            .submit_final(&t("a"), Round::Round1, TRAIN, "fail", false, 200)
            .unwrap();
        assert_eq!(
            c.participant_log(&r1.job.job_id),
            Some(ParticipantLog::PendingReview)
        );
        run(&mut c, &r1.job.job_id, JobStatus::Failed, 201);
        let item = c
            .create_review_item(
                &r1.job.job_id,
                "crash on s0001".into(),
                &RedactionPolicy::default().with_sequestered_ids(["s0001"]),
                202,
            )
            .unwrap();
        assert!(c.release_full_log(&r1.job.job_id, "x".into(), 203).is_err());
        assert!(matches!(
            c.decide_review(&item, ReviewDecision::Release, "mallory", None, 203),
            Err(PhaseError::Review(ReviewError::Unauthorized(_)))
        ));
        c.decide_review(&item, ReviewDecision::Release, "organizer", None, 204)
            .unwrap();
        assert_eq!(
            c.participant_log(&r1.job.job_id),
            Some(ParticipantLog::Released {
                log: "crash on [SUBJECT]".into()
            })
        );
        assert!(matches!(
            c.decide_review(&item, ReviewDecision::Withhold, "organizer", None, 205),
            Err(PhaseError::Review(ReviewError::AlreadyDecided(_)))
        ));

        c.open_round(Round::Feedback, 206).unwrap();
        let fb = c
            .submit_final(&t("a"), Round::Feedback, TRAIN, "fail", false, 207)
            .unwrap();
        run(&mut c, &fb.job.job_id, JobStatus::Failed, 208);
        assert!(c
            .create_review_item(&fb.job.job_id, "x".into(), &RedactionPolicy::default(), 209)
            .is_err());
        c.release_full_log(&fb.job.job_id, "full log /data/x/y".into(), 209)
            .unwrap();
        assert_eq!(
            c.participant_log(&fb.job.job_id),
            Some(ParticipantLog::Full {
                log: "full log /data/x/y".into()
            })
        );
    }

    #[test]
    fn a1_board_keeps_best_per_team() {
        let mut c = challenge_with(&["a"]);
        for (i, sev) in [0.6, 0.8, 0.7].into_iter().enumerate() {
            let now = i as i64 * 7 * DAY;
            let RollingOutcome::Accepted { job, .. } =
                c.submit_rolling(&t("a"), INFER, "noise", now).unwrap()
            else {
                panic!("rejected")
            };
            run(&mut c, &job.job_id, JobStatus::Completed, now);
            c.record_score(&job.job_id, score(sev), now).unwrap();
        }
        let board = c.leaderboard(Board::A1);
        assert_eq!(board.len(), 1);
        assert_eq!(board[0].auc_severity, 0.8);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Rolling(usize, i64),
        A2(usize),
        Open(Round),
        Close(Round),
        Final(usize, Round, bool),
        Finish(usize, bool),
    }

    fn round() -> impl Strategy<Value = Round> {
        prop_oneof![
            Just(Round::Round1),
            Just(Round::Feedback),
            Just(Round::Round2)
        ]
    }

    fn qualification_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            6 => (0..4usize, 0..10 * DAY).prop_map(|(t, dt)| Op::Rolling(t, dt)),
            3 => (0..4usize).prop_map(Op::A2),
            4 => (0..64usize, prop::bool::weighted(0.8)).prop_map(|(j, ok)| Op::Finish(j, ok)),
            1 => (0..4usize, round(), any::<bool>()).prop_map(|(t, r, c)| Op::Final(t, r, c)),
        ]
    }

    fn final_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            3 => round().prop_map(Op::Open),
            1 => round().prop_map(Op::Close),
            6 => (0..4usize, round(), any::<bool>()).prop_map(|(t, r, c)| Op::Final(t, r, c)),
            4 => (0..64usize, prop::bool::weighted(0.8)).prop_map(|(j, ok)| Op::Finish(j, ok)),
            1 => (0..4usize, 0..10 * DAY).prop_map(|(t, dt)| Op::Rolling(t, dt)),
            1 => (0..4usize).prop_map(Op::A2),
        ]
    }

    const TEAMS: [&str; 4] = ["a", "b", "c", "d"];

    fn drive(c: &mut Challenge, ops: &[Op], now: &mut Timestamp) {
        for op in ops {
            *now += 3600;
            let now = *now;
            match op {
                Op::Rolling(i, dt) => {
                    let _ = c.submit_rolling(&t(TEAMS[*i]), INFER, "noise", now + dt);
                }
                Op::A2(i) => {
                    let _ = c.submit_a2(&t(TEAMS[*i]), INFER, "noise", now);
                }
                Op::Open(r) => {
                    let _ = c.open_round(*r, now);
                }
                Op::Close(r) => {
                    let _ = c.close_round(*r, now);
                }
                Op::Final(i, r, confirm) => {
                    let _ = c.submit_final(&t(TEAMS[*i]), *r, TRAIN, "logistic", *confirm, now);
                }
                Op::Finish(j, ok) => {
                    let ids: Vec<JobId> = c
                        .jobs()
                        .filter(|j| !j.status.is_terminal())
                        .map(|j| j.spec.job_id.clone())
                        .collect();
                    if ids.is_empty() {
                        continue;
                    }
                    let id = ids[j % ids.len()].clone();
                    let status = if *ok {
                        JobStatus::Completed
                    } else {
                        JobStatus::Failed
                    };
                    run(c, &id, status, now);
                    if *ok && c.job(&id).unwrap().board().is_some() {
                        c.record_score(&id, score((j % 10) as f64 / 10.0), now)
                            .unwrap();
                    }
                }
            }
        }
    }

    fn schedule(c: &mut Challenge, qualification: &[Op], accepts: &[bool], final_ops: &[Op]) {
        let mut now = 0;
        drive(c, qualification, &mut now);
        settle(c, now);
        c.close_qualification(
            |team| accepts[TEAMS.iter().position(|n| *n == team.as_str()).unwrap()],
            now,
        )
        .unwrap();
        drive(c, final_ops, &mut now);
        settle(c, now);
        c.close_final(now).unwrap();
    }

    fn settle(c: &mut Challenge, now: Timestamp) {
        let ids: Vec<JobId> = c
            .jobs()
            .filter(|j| !j.status.is_terminal())
            .map(|j| j.spec.job_id.clone())
            .collect();
        for (i, id) in ids.iter().enumerate() {
            run(c, id, JobStatus::Completed, now);
            if c.job(id).unwrap().board().is_some() {
                c.record_score(id, score((i % 10) as f64 / 10.0), now)
                    .unwrap();
            }
        }
    }

    /// Checks the lifecycle rules from the event log alone.
    fn check_log_invariants(log: &[EventRecord], countdown: i64) -> Result<(), String> {
        let mut rolling: BTreeMap<TeamId, Vec<Timestamp>> = BTreeMap::new();
        let mut a2: BTreeMap<TeamId, usize> = BTreeMap::new();
        let mut r1: BTreeMap<TeamId, Vec<SubmissionId>> = BTreeMap::new();
        let mut r2: BTreeMap<TeamId, usize> = BTreeMap::new();
        for record in log {
            match &record.event {
                Event::RollingAccepted { submission, .. } => rolling
                    .entry(submission.team_id.clone())
                    .or_default()
                    .push(submission.submitted_at),
                Event::A2Accepted { submission, .. } => {
                    *a2.entry(submission.team_id.clone()).or_default() += 1
                }
                Event::FinalSubmissionAccepted {
                    round,
                    submission,
                    job,
                    renounced,
                } => {
                    let team = submission.team_id.clone();
                    match round {
                        Round::Round1 => r1
                            .entry(team)
                            .or_default()
                            .push(submission.submission_id.clone()),
                        Round::Feedback => {
                            if job.split_name == SplitName::TrainingB {
                                return Err(format!(
                                    "feedback job {} touches training_B",
                                    job.job_id
                                ));
                            }
                        }
                        Round::Round2 => {
                            *r2.entry(team.clone()).or_default() += 1;
                            let first = r1.get(&team).and_then(|v| v.first());
                            if renounced.as_ref() != first || first.is_none() {
                                return Err(format!("round2 of {team} without renouncing round1"));
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        for (team, times) in rolling {
            if times.windows(2).any(|w| w[1] - w[0] < countdown) {
                return Err(format!("countdown violated for {team}: {times:?}"));
            }
        }
        if let Some((team, n)) = a2.iter().find(|(_, n)| **n > 1) {
            return Err(format!("{team} has {n} A2 acceptances"));
        }
        if let Some((team, v)) = r1.iter().find(|(_, v)| v.len() > 1) {
            return Err(format!("{team} has {} round1 submissions", v.len()));
        }
        if let Some((team, n)) = r2.iter().find(|(_, n)| **n > 1) {
            return Err(format!("{team} has {n} round2 submissions"));
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn random_schedules_keep_lifecycle_rules(
            qualification in prop::collection::vec(qualification_op(), 0..40),
            accept_mask in prop::collection::vec(prop::bool::weighted(0.8), 4),
            final_ops in prop::collection::vec(final_op(), 0..60),
        ) {
            let mut c = challenge_with(&TEAMS);
            schedule(&mut c, &qualification, &accept_mask, &final_ops);
            prop_assert_eq!(check_log_invariants(c.log(), DEFAULT_COUNTDOWN), Ok(()));
            for state in c.state().teams.values() {
                if let Some(r2) = &state.round2_submission {
                    let r1 = state.round1_submission.as_ref().expect("round2 implies round1");
                    prop_assert_eq!(c.submission(r1).unwrap().status, SubmissionStatus::Renounced);
                    prop_assert_ne!(c.submission(r2).unwrap().status, SubmissionStatus::Renounced);
                }
            }
            for job in c.jobs() {
                if job.purpose == (JobPurpose::Round { round: Round::Feedback }) {
                    prop_assert_ne!(job.spec.split_name, SplitName::TrainingB);
                }
            }
            let replayed = Challenge::replay(c.log().to_vec()).unwrap();
            prop_assert_eq!(replayed.state(), c.state());
        }
    }

    const DEFAULT_COUNTDOWN: i64 = super::super::DEFAULT_COUNTDOWN_SECONDS;
}
