//! A running challenge: the event-sourced engine, the file store, the job
//! runner and evaluation wired together. Shared by the HTTP service and
//! the command line.

mod eval;
mod store;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::DatasetSplit;
use crate::domain::{
    JobId, JobMode, JobStatus, LogRoute, PhaseTarget, SplitName, SubjectRecord, Submission,
    SubmissionId, SubmissionKind, Team, TeamId, Timestamp,
};
use crate::metrics::{rank_matrix, DisplayFilter, LeaderboardEntry, MetricsError, RankMatrix};
use crate::phase::{
    Board, Challenge, ChallengeConfig, ChallengeHandle, JobPurpose, JobRecord, Phase, PhaseError,
    PhaseStatus, RollingOutcome, Round, ScoreRecord, TestBPlan,
};
use crate::review::{
    ParticipantLog, RedactionPolicy, ReviewDecision, ReviewError, ReviewQueueEntry,
};
use crate::sandbox::{AdapterSpec, Backend, DataSource, JobOutcome, Runner, SandboxError};

pub use eval::{
    evaluate, final_report, roc_csv, EnsembleReport, EvalReport, FinalReport, PairwiseDelong,
    ENSEMBLE_SIZE,
};
pub use store::{Store, StoreError};

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    Invalid(String),
}

/// Who is asking. Tokens map to viewers in the service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", content = "id", rename_all = "snake_case")]
pub enum Viewer {
    Organizer(String),
    Team(TeamId),
    Anonymous,
}

#[derive(Debug, Clone)]
pub struct PlatformOptions {
    pub backend: Backend,
    /// Jobs run concurrently by `run_pending`.
    pub parallelism: usize,
}

impl Default for PlatformOptions {
    fn default() -> Self {
        Self {
            backend: Backend::InProcess,
            parallelism: std::thread::available_parallelism().map_or(2, |n| n.get().min(8)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub team_id: TeamId,
    pub target: PhaseTarget,
    /// Adapter specification, e.g. `logistic`.
    pub payload: String,
    /// Defaults to what the target requires.
    #[serde(default)]
    pub kind: Option<SubmissionKind>,
    /// Round 2 only: acknowledges that round 1 is renounced.
    #[serde(default)]
    pub confirm_renounce: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SubmitOutcome {
    Accepted {
        submission_id: SubmissionId,
        job_id: JobId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        renounced: Option<SubmissionId>,
    },
    Rejected {
        next_allowed_at: Timestamp,
    },
}

/// One finished job as reported by `run_pending`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: JobId,
    pub team_id: TeamId,
    pub submission_id: SubmissionId,
    pub status: JobStatus,
    pub wall_clock_used: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc_severity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: JobId,
    pub split: SplitName,
    pub mode: JobMode,
    #[serde(flatten)]
    pub purpose: JobPurpose,
    pub status: JobStatus,
    pub log: ParticipantLog,
    /// Only for public-data training, whose model goes back to the team.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionView {
    pub submission: Submission,
    pub jobs: Vec<JobView>,
}

pub struct Platform {
    store: Store,
    handle: ChallengeHandle,
    runner: Runner,
    policy: RedactionPolicy,
    parallelism: usize,
}

fn target_kind(target: PhaseTarget) -> SubmissionKind {
    match target {
        PhaseTarget::RollingA1 | PhaseTarget::FinalA2 => SubmissionKind::InferenceAlgorithm,
        _ => SubmissionKind::TrainingCodebase,
    }
}

fn scored(purpose: &JobPurpose) -> Option<Board> {
    match purpose {
        JobPurpose::Rolling => Some(Board::A1),
        JobPurpose::A2 => Some(Board::A2),
        JobPurpose::TestB { .. } => Some(Board::B),
        JobPurpose::Round { .. } => None,
    }
}

impl Platform {
    /// Creates a new challenge store at `root`.
    pub fn create(
        root: impl Into<PathBuf>,
        config: ChallengeConfig,
        cohort: Vec<SubjectRecord>,
        split: DatasetSplit,
        options: PlatformOptions,
        now: Timestamp,
    ) -> Result<Self, PlatformError> {
        let store = Store::open(root)?;
        store.save_data(&cohort, &split)?;
        let handle = ChallengeHandle::create(config, now, &store.events_path())?;
        Self::assemble(store, handle, cohort, split, options)
    }

    /// Reopens an existing store, replaying its event log.
    pub fn open(root: impl Into<PathBuf>, options: PlatformOptions) -> Result<Self, PlatformError> {
        let store = Store::open(root)?;
        let (cohort, split) = store.load_data()?;
        let handle = ChallengeHandle::open(&store.events_path())?;
        Self::assemble(store, handle, cohort, split, options)
    }

    /// An in-memory challenge over a temporary store, for tests and sweeps.
    pub fn ephemeral(
        root: impl Into<PathBuf>,
        config: ChallengeConfig,
        cohort: Vec<SubjectRecord>,
        split: DatasetSplit,
        options: PlatformOptions,
        now: Timestamp,
    ) -> Result<Self, PlatformError> {
        let handle = ChallengeHandle::in_memory(Challenge::new(config, now)?);
        Self::assemble(Store::open(root)?, handle, cohort, split, options)
    }

    fn assemble(
        store: Store,
        handle: ChallengeHandle,
        cohort: Vec<SubjectRecord>,
        split: DatasetSplit,
        options: PlatformOptions,
    ) -> Result<Self, PlatformError> {
        let sequestered: BTreeSet<String> = SplitName::ALL
            .into_iter()
            .filter(|s| s.is_sequestered())
            .flat_map(|s| split.subset(s).iter().map(|id| id.as_str().to_owned()))
            .collect();
        let base = match store.policy_text()? {
            Some(text) => RedactionPolicy::parse(&text)?,
            None => RedactionPolicy::default(),
        };
        let policy = base.with_sequestered_ids(sequestered);
        let data = Arc::new(DataSource::new(cohort, split));
        let runner = Runner::new(data, options.backend, store.scratch_root());
        Ok(Self {
            store,
            handle,
            runner,
            policy,
            parallelism: options.parallelism.max(1),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn handle(&self) -> &ChallengeHandle {
        &self.handle
    }

    pub fn runner(&self) -> &Runner {
        &self.runner
    }

    pub fn policy(&self) -> &RedactionPolicy {
        &self.policy
    }

    pub fn phase_status(&self) -> PhaseStatus {
        self.handle.read(Challenge::phase_status)
    }

    fn is_organizer(&self, viewer: &Viewer) -> bool {
        match viewer {
            Viewer::Organizer(id) => self.handle.read(|c| c.is_organizer(id)),
            _ => false,
        }
    }

    fn require_organizer(&self, viewer: &Viewer) -> Result<String, PlatformError> {
        match viewer {
            Viewer::Organizer(id) if self.is_organizer(viewer) => Ok(id.clone()),
            _ => Err(PlatformError::Forbidden("organizer role required".into())),
        }
    }

    pub fn register_team(&self, team: Team, now: Timestamp) -> Result<(), PlatformError> {
        Ok(self.handle.write(|c| c.register_team(team, now))?)
    }

    /// Stores the payload and hands the submission to the engine. The job it
    /// creates stays queued until `run_pending`.
    pub fn submit(
        &self,
        request: &SubmitRequest,
        now: Timestamp,
    ) -> Result<SubmitOutcome, PlatformError> {
        let payload = request.payload.trim();
        if !payload.starts_with("exec:") {
            AdapterSpec::parse(payload).map_err(PlatformError::Invalid)?;
        }
        let payload_ref = self.store.put_payload(payload)?;
        let kind = request.kind.unwrap_or_else(|| target_kind(request.target));
        let team = &request.team_id;
        let outcome = self.handle.write(|c| {
            let accepted = |submission_id, job_id, renounced| SubmitOutcome::Accepted {
                submission_id,
                job_id,
                renounced,
            };
            Ok(match request.target {
                PhaseTarget::RollingA1 => match c.submit_rolling(team, kind, &payload_ref, now)? {
                    RollingOutcome::Accepted { submission_id, job } => {
                        accepted(submission_id, job.job_id, None)
                    }
                    RollingOutcome::Rejected { next_allowed_at } => {
                        SubmitOutcome::Rejected { next_allowed_at }
                    }
                },
                PhaseTarget::FinalA2 => {
                    let (submission_id, job) = c.submit_a2(team, kind, &payload_ref, now)?;
                    accepted(submission_id, job.job_id, None)
                }
                target => {
                    let round = match target {
                        PhaseTarget::FtRound1 => Round::Round1,
                        PhaseTarget::FtFeedback => Round::Feedback,
                        _ => Round::Round2,
                    };
                    let a = c.submit_final(
                        team,
                        round,
                        kind,
                        &payload_ref,
                        request.confirm_renounce,
                        now,
                    )?;
                    accepted(a.submission_id, a.job.job_id, a.renounced)
                }
            })
        })?;
        Ok(outcome)
    }

    /// Runs every queued job, `parallelism` at a time, and records outcomes,
    /// scores and log routing through the engine. Safe to call concurrently:
    /// a job is claimed by the `JobStarted` event.
    pub fn run_pending(
        &self,
        clock: &(dyn Fn() -> Timestamp + Sync),
    ) -> Result<Vec<JobSummary>, PlatformError> {
        let queued: VecDeque<JobId> = self.handle.read(|c| {
            c.jobs()
                .filter(|j| j.status == JobStatus::Queued)
                .map(|j| j.spec.job_id.clone())
                .collect()
        });
        let workers = self.parallelism.min(queued.len());
        let queue = Mutex::new(queued);
        let results = Mutex::new(Vec::new());
        let first_error = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let Some(job_id) = queue.lock().unwrap_or_else(|p| p.into_inner()).pop_front()
                    else {
                        break;
                    };
                    match self.run_one(&job_id, clock) {
                        Ok(Some(summary)) => results
                            .lock()
                            .unwrap_or_else(|p| p.into_inner())
                            .push(summary),
                        Ok(None) => {}
                        Err(e) => {
                            first_error
                                .lock()
                                .unwrap_or_else(|p| p.into_inner())
                                .get_or_insert(e);
                        }
                    }
                });
            }
        });
        if let Some(e) = first_error.into_inner().unwrap_or_else(|p| p.into_inner()) {
            return Err(e);
        }
        let mut results = results.into_inner().unwrap_or_else(|p| p.into_inner());
        results.sort_by(|a, b| a.job_id.cmp(&b.job_id));
        Ok(results)
    }

    fn labels(&self, split: SplitName) -> Vec<SubjectRecord> {
        let data = self.runner.data();
        data.split
            .subset(split)
            .iter()
            .filter_map(|id| data.records.get(id).cloned())
            .collect()
    }

    fn execute(&self, record: &JobRecord, payload_ref: &str) -> JobOutcome {
        let attempt = || -> Result<JobOutcome, PlatformError> {
            let adapter = self.store.payload(payload_ref)?;
            let model = record
                .spec
                .model_ref
                .as_deref()
                .map(|r| self.store.model(r))
                .transpose()?;
            Ok(self
                .runner
                .run_job(&record.spec, &adapter, model.as_ref())?)
        };
        attempt().unwrap_or_else(|e| JobOutcome {
            job_id: record.spec.job_id.clone(),
            status: JobStatus::Failed,
            model: None,
            predictions: None,
            raw_log: format!("runner: job could not start: {e}\n"),
            wall_clock_used: 0.0,
            scratch_used: 0,
            audit: Vec::new(),
            error: Some(e.to_string()),
        })
    }

    fn run_one(
        &self,
        job_id: &JobId,
        clock: &(dyn Fn() -> Timestamp + Sync),
    ) -> Result<Option<JobSummary>, PlatformError> {
        match self.handle.write(|c| c.start_job(job_id, clock())) {
            Ok(()) => {}
            Err(PhaseError::JobState { .. }) => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let (record, payload_ref) = self.handle.read(|c| {
            let record = c.job(job_id).cloned().expect("started job exists");
            let payload = c
                .submission(&record.spec.submission_id)
                .map(|s| s.payload_ref.clone())
                .unwrap_or_default();
            (record, payload)
        });
        let mut outcome = self.execute(&record, &payload_ref);
        if let Some(model) = &outcome.model {
            self.store.put_model(model)?;
        }
        if let Some(set) = &outcome.predictions {
            self.store.put_predictions(job_id, set)?;
        }

        let mut score = None;
        if let (JobStatus::Completed, Some(board)) = (outcome.status, scored(&record.purpose)) {
            let preds = outcome
                .predictions
                .as_ref()
                .expect("completed scoring job has predictions");
            match evaluate(
                preds,
                &self.labels(record.spec.split_name),
                record.spec.seed,
            ) {
                Ok(mut report) => {
                    report.job_id = Some(job_id.clone());
                    report.team_id = Some(record.team_id.clone());
                    report.board = Some(board);
                    self.store.put_report(job_id, &report)?;
                    score = Some(ScoreRecord {
                        auc_severity: report.result.auc_severity,
                        auc_presence: report.result.auc_presence,
                        ci_severity: report.result.ci_severity,
                        n_eval_cases: report.result.n_eval_cases,
                    });
                }
                Err(e) => {
                    let message = format!("evaluation failed: {e}");
                    outcome.raw_log.push_str(&format!("runner: {message}\n"));
                    outcome.status = JobStatus::Failed;
                    outcome.error = Some(message);
                }
            }
        }
        self.store.put_raw_log(job_id, &outcome.raw_log)?;

        let model_ref = outcome.model_ref().map(str::to_owned);
        self.handle.write(|c| {
            let now = clock();
            c.finish_job(job_id, outcome.status, model_ref, now)?;
            if let Some(score) = score.clone() {
                c.record_score(job_id, score, now)?;
            }
            match record.spec.log_route {
                LogRoute::Review => {
                    c.create_review_item(job_id, outcome.raw_log.clone(), &self.policy, now)?;
                }
                LogRoute::FullRelease => {
                    c.release_full_log(job_id, outcome.raw_log.clone(), now)?
                }
                LogRoute::Withheld => {}
            }
            Ok(())
        })?;
        Ok(Some(JobSummary {
            job_id: job_id.clone(),
            team_id: record.team_id,
            submission_id: record.spec.submission_id,
            status: outcome.status,
            wall_clock_used: outcome.wall_clock_used,
            auc_severity: score.map(|s| s.auc_severity),
            error: outcome.error,
        }))
    }

    pub fn close_qualification(
        &self,
        accepts: impl FnMut(&TeamId) -> bool,
        now: Timestamp,
    ) -> Result<Vec<TeamId>, PlatformError> {
        Ok(self.handle.write(|c| c.close_qualification(accepts, now))?)
    }

    pub fn open_round(&self, round: Round, now: Timestamp) -> Result<(), PlatformError> {
        Ok(self.handle.write(|c| c.open_round(round, now))?)
    }

    pub fn close_round(&self, round: Round, now: Timestamp) -> Result<(), PlatformError> {
        Ok(self.handle.write(|c| c.close_round(round, now))?)
    }

    /// Closes the Final phase and queues the test-B scoring jobs.
    pub fn close_final(&self, now: Timestamp) -> Result<TestBPlan, PlatformError> {
        Ok(self.handle.write(|c| c.close_final(now))?)
    }

    fn board_visible(&self, board: Board, viewer: &Viewer) -> bool {
        let phase = self.handle.read(Challenge::phase);
        match board {
            Board::A1 => true,
            Board::A2 => phase != Phase::Qualification || self.is_organizer(viewer),
            Board::B => phase == Phase::Closed || self.is_organizer(viewer),
        }
    }

    /// A1 is public; A2 opens when Qualification closes and B when the
    /// Final phase closes. Organizers see everything.
    pub fn leaderboard(
        &self,
        board: Board,
        viewer: &Viewer,
    ) -> Result<Vec<LeaderboardEntry>, PlatformError> {
        if !self.board_visible(board, viewer) {
            return Err(PlatformError::Forbidden(format!(
                "{board:?} leaderboard is not public yet"
            )));
        }
        Ok(self.handle.read(|c| c.leaderboard(board)))
    }

    /// Evaluation reports of a submission's scoring jobs, under the same
    /// visibility as their boards.
    pub fn eval_reports(
        &self,
        submission_id: &SubmissionId,
        viewer: &Viewer,
    ) -> Result<Vec<EvalReport>, PlatformError> {
        let jobs: Vec<(JobId, Option<Board>, bool)> = self.handle.read(|c| {
            c.jobs()
                .filter(|j| &j.spec.submission_id == submission_id || matches!(&j.purpose, JobPurpose::TestB { source, .. } if source == submission_id))
                .map(|j| (j.spec.job_id.clone(), scored(&j.purpose), j.score.is_some()))
                .collect()
        });
        if self.handle.read(|c| c.submission(submission_id).is_none()) {
            return Err(PlatformError::NotFound(format!(
                "submission {submission_id}"
            )));
        }
        let mut reports = Vec::new();
        for (job_id, board, has_score) in jobs {
            let Some(board) = board else { continue };
            if !has_score || !self.board_visible(board, viewer) {
                continue;
            }
            reports.push(self.store.report(&job_id)?);
        }
        Ok(reports)
    }

    /// A submission and its jobs as its team (or an organizer) sees them.
    /// Logs follow their route: never raw for sequestered training.
    pub fn submission_view(
        &self,
        submission_id: &SubmissionId,
        viewer: &Viewer,
    ) -> Result<SubmissionView, PlatformError> {
        let organizer = self.is_organizer(viewer);
        self.handle.read(|c| {
            let submission = c
                .submission(submission_id)
                .ok_or_else(|| PlatformError::NotFound(format!("submission {submission_id}")))?;
            let owner = matches!(viewer, Viewer::Team(t) if *t == submission.team_id);
            if !owner && !organizer {
                return Err(PlatformError::Forbidden("not your submission".into()));
            }
            let jobs = c
                .jobs_for(submission_id)
                .into_iter()
                .map(|j| JobView {
                    job_id: j.spec.job_id.clone(),
                    split: j.spec.split_name,
                    mode: j.spec.mode,
                    purpose: j.purpose.clone(),
                    status: j.status,
                    log: c
                        .participant_log(&j.spec.job_id)
                        .unwrap_or(ParticipantLog::None),
                    model_ref: (j.spec.log_route == LogRoute::FullRelease)
                        .then(|| j.model_ref.clone())
                        .flatten(),
                })
                .collect();
            Ok(SubmissionView {
                submission: submission.clone(),
                jobs,
            })
        })
    }

    pub fn review_queue(&self, viewer: &Viewer) -> Result<Vec<ReviewQueueEntry>, PlatformError> {
        self.require_organizer(viewer)?;
        Ok(self
            .handle
            .read(|c| c.review_items().map(|i| i.queue_view()).collect()))
    }

    pub fn decide_review(
        &self,
        item_id: &str,
        decision: ReviewDecision,
        viewer: &Viewer,
        edits: Option<String>,
        now: Timestamp,
    ) -> Result<ReviewQueueEntry, PlatformError> {
        let reviewer = self.require_organizer(viewer)?;
        Ok(self.handle.write(|c| {
            c.decide_review(item_id, decision, &reviewer, edits, now)
                .map(|i| i.queue_view())
        })?)
    }

    pub fn decide_method_review(
        &self,
        team_id: &TeamId,
        approved: bool,
        viewer: &Viewer,
        now: Timestamp,
    ) -> Result<(), PlatformError> {
        let reviewer = self.require_organizer(viewer)?;
        Ok(self
            .handle
            .write(|c| c.decide_method_review(team_id, &reviewer, approved, now))?)
    }

    /// Test-B prediction sets of the teams on the B board.
    fn board_b_sets(
        &self,
    ) -> Result<
        (
            Vec<LeaderboardEntry>,
            BTreeMap<TeamId, crate::domain::PredictionSet>,
        ),
        PlatformError,
    > {
        let (board, jobs) = self.handle.read(|c| {
            let board = c.leaderboard(Board::B);
            let jobs: BTreeMap<TeamId, (JobId, SubmissionId)> = c
                .jobs()
                .filter(|j| matches!(j.purpose, JobPurpose::TestB { .. }) && j.score.is_some())
                .map(|j| {
                    (
                        j.team_id.clone(),
                        (j.spec.job_id.clone(), j.spec.submission_id.clone()),
                    )
                })
                .collect();
            (board, jobs)
        });
        let mut sets = BTreeMap::new();
        for entry in &board {
            let (job_id, submission_id) = &jobs[&entry.team_id];
            sets.insert(
                entry.team_id.clone(),
                self.store.predictions(job_id, submission_id.clone())?,
            );
        }
        Ok((board, sets))
    }

    /// Ranked B board with the top-3 ensemble and pairwise DeLong tests.
    pub fn final_report(&self, viewer: &Viewer) -> Result<FinalReport, PlatformError> {
        if !self.board_visible(Board::B, viewer) {
            return Err(PlatformError::Forbidden(
                "the final report is published when the Final phase closes".into(),
            ));
        }
        let (board, sets) = self.board_b_sets()?;
        let excluded = self.handle.read(|c| {
            c.state()
                .teams
                .values()
                .filter(|t| t.finalist && c.fallback_policy(&t.team_id).is_none())
                .map(|t| t.team_id.clone())
                .collect()
        });
        let seed = self.handle.read(|c| c.config().seed);
        Ok(final_report(
            board,
            &sets,
            &self.labels(SplitName::TestB),
            excluded,
            seed,
        )?)
    }

    /// Per-subject severity ranks on test B. Columns are grouped by true
    /// outcome, so this is organizer-only.
    pub fn rank_matrix(
        &self,
        filter: DisplayFilter,
        viewer: &Viewer,
    ) -> Result<RankMatrix, PlatformError> {
        self.require_organizer(viewer)?;
        let (board, sets) = self.board_b_sets()?;
        let teams: Vec<(TeamId, &crate::domain::PredictionSet)> = board
            .iter()
            .map(|e| (e.team_id.clone(), &sets[&e.team_id]))
            .collect();
        Ok(rank_matrix(&teams, &self.labels(SplitName::TestB), filter)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, sample_splits, CohortConfig, SplitConfig};
    use crate::domain::ParticipantId;
    use crate::metrics::TrainedOn;

    fn platform(dir: &std::path::Path) -> Platform {
        let cohort = generate_cohort(&CohortConfig {
            n_subjects: 600,
            seed: 5,
            ..CohortConfig::default()
        })
        .unwrap();
        let split = sample_splits(
            &cohort,
            &SplitConfig {
                size_training_a: 150,
                size_test_a1: 60,
                size_test_a2: 60,
                size_test_b: 150,
                seed: 2,
                stratify: false,
            },
        )
        .unwrap();
        let config = ChallengeConfig {
            n_finalists: 3,
            ..ChallengeConfig::default()
        };
        Platform::create(
            dir.join("store"),
            config,
            cohort,
            split,
            PlatformOptions::default(),
            0,
        )
        .unwrap()
    }

    fn team(id: &str) -> Team {
        Team {
            team_id: id.into(),
            member_ids: BTreeSet::from([ParticipantId::new(format!("{id}-1"))]),
            display_name: id.into(),
        }
    }

    fn submit(
        p: &Platform,
        team: &str,
        target: PhaseTarget,
        payload: &str,
        now: Timestamp,
    ) -> SubmitOutcome {
        p.submit(
            &SubmitRequest {
                team_id: team.into(),
                target,
                payload: payload.into(),
                kind: None,
                confirm_renounce: target == PhaseTarget::FtRound2,
            },
            now,
        )
        .unwrap()
    }

    #[test]
    fn lifecycle_with_fallback_and_review() {
        let dir = tempfile::tempdir().unwrap();
        let p = platform(dir.path());
        let organizer = Viewer::Organizer("organizer".into());
        let clock = || 10;
        // training_B is larger than training_A, so this adapter fails only in the Final phase
        let teams = [
            ("good", "logistic"),
            ("meh", "naive-bayes"),
            ("fragile", "fail-above:200"),
            ("noise", "noise"),
        ];
        for (i, (t, adapter)) in teams.iter().enumerate() {
            p.register_team(team(t), 1).unwrap();
            submit(&p, t, PhaseTarget::RollingA1, adapter, 2 + i as i64);
            submit(&p, t, PhaseTarget::FinalA2, adapter, 3 + i as i64);
        }
        assert!(matches!(
            submit(&p, "good", PhaseTarget::RollingA1, "logistic", 100),
            SubmitOutcome::Rejected {
                next_allowed_at: 604_802
            }
        ));
        let ran = p.run_pending(&clock).unwrap();
        assert_eq!(ran.len(), 8);
        assert!(
            ran.iter().all(|j| j.status == JobStatus::Completed),
            "{ran:?}"
        );

        assert_eq!(
            p.leaderboard(Board::A1, &Viewer::Anonymous).unwrap().len(),
            4
        );
        assert!(matches!(
            p.leaderboard(Board::A2, &Viewer::Team("good".into())),
            Err(PlatformError::Forbidden(_))
        ));
        let a2 = p.leaderboard(Board::A2, &organizer).unwrap();
        assert_eq!(a2.len(), 4);

        let finalists = p
            .close_qualification(|t| t.as_str() != "noise", 20)
            .unwrap();
        assert_eq!(finalists.len(), 3);
        for t in ["good", "meh", "fragile"] {
            submit(
                &p,
                t,
                PhaseTarget::FtRound1,
                teams.iter().find(|x| x.0 == t).unwrap().1,
                30,
            );
        }
        let ran = p.run_pending(&clock).unwrap();
        let fragile = ran
            .iter()
            .find(|j| j.team_id.as_str() == "fragile")
            .unwrap();
        assert_eq!(fragile.status, JobStatus::Failed);

        let queue = p.review_queue(&organizer).unwrap();
        assert_eq!(queue.len(), 3);
        assert!(p.review_queue(&Viewer::Team("good".into())).is_err());
        let item = queue
            .iter()
            .find(|i| i.team_id.as_str() == "fragile")
            .unwrap();
        let view = p
            .submission_view(&fragile.submission_id, &Viewer::Team("fragile".into()))
            .unwrap();
        assert_eq!(view.jobs[0].log, ParticipantLog::PendingReview);
        p.decide_review(&item.item_id, ReviewDecision::Release, &organizer, None, 40)
            .unwrap();
        let view = p
            .submission_view(&fragile.submission_id, &Viewer::Team("fragile".into()))
            .unwrap();
        assert!(
            matches!(&view.jobs[0].log, ParticipantLog::Released { log } if log.contains("out of memory"))
        );
        assert!(p
            .submission_view(&fragile.submission_id, &Viewer::Team("good".into()))
            .is_err());

        let plan = p.close_final(50).unwrap();
        assert_eq!(plan.jobs.len(), 3);
        p.run_pending(&clock).unwrap();
        let board = p.leaderboard(Board::B, &Viewer::Anonymous).unwrap();
        assert_eq!(board.len(), 3);
        let fragile_row = board
            .iter()
            .find(|e| e.team_id.as_str() == "fragile")
            .unwrap();
        assert_eq!(fragile_row.trained_on, Some(TrainedOn::A));
        assert!(board
            .iter()
            .filter(|e| e.team_id.as_str() != "fragile")
            .all(|e| e.trained_on == Some(TrainedOn::B)));

        let report = p.final_report(&Viewer::Anonymous).unwrap();
        assert_eq!(report.delong.len(), 3);
        assert_eq!(report.ensemble.as_ref().unwrap().members.len(), 3);
        assert!(p
            .rank_matrix(DisplayFilter::Severe, &Viewer::Anonymous)
            .is_err());
        let matrix = p.rank_matrix(DisplayFilter::Severe, &organizer).unwrap();
        assert_eq!(matrix.team_ids.len(), 3);

        let reports = p
            .eval_reports(&fragile_row.submission_id, &Viewer::Anonymous)
            .unwrap();
        assert!(reports.iter().any(|r| r.board == Some(Board::B)));

        // the store reopens to the same state
        let live = p.handle().read(|c| c.state().clone());
        drop(p);
        let reopened =
            Platform::open(dir.path().join("store"), PlatformOptions::default()).unwrap();
        assert_eq!(reopened.handle().read(|c| c.state().clone()), live);
    }

    #[test]
    fn bad_payloads_are_refused_before_submission() {
        let dir = tempfile::tempdir().unwrap();
        let p = platform(dir.path());
        p.register_team(team("a"), 1).unwrap();
        let err = p
            .submit(
                &SubmitRequest {
                    team_id: "a".into(),
                    target: PhaseTarget::RollingA1,
                    payload: "rm -rf /".into(),
                    kind: None,
                    confirm_renounce: false,
                },
                2,
            )
            .unwrap_err();
        assert!(matches!(err, PlatformError::Invalid(_)));
        assert_eq!(p.handle().read(|c| c.state().submissions.len()), 0);
    }
}
