//! Shared domain types for the challenge engine.
//!
//! Everything here is a plain value type. Validation lives next to the type it
//! protects; violations of cohort invariants are reported as data, while
//! broken predictions and illegal state transitions are errors.

mod ids;
pub mod io;
mod job;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ids::{JobId, ParticipantId, SubjectId, SubmissionId, TeamId, Timestamp};
pub use job::{JobMode, JobSpec, JobStatus, LogRoute};

/// Highest age-bin index; bin 8 holds everyone aged 80 and above.
pub const MAX_AGE_BIN: u8 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("participant {participant} already belongs to team {existing}")]
    TeamOverlap {
        participant: ParticipantId,
        existing: TeamId,
    },
    #[error("team {0} is already registered")]
    DuplicateTeam(TeamId),
    #[error("illegal submission status transition {from:?} -> {to:?}")]
    IllegalTransition {
        from: SubmissionStatus,
        to: SubmissionStatus,
    },
    #[error("invalid prediction for subject {subject}: {reason}")]
    InvalidPrediction { subject: SubjectId, reason: String },
    #[error("invalid resource budget: {0}")]
    InvalidBudget(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn code(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "M" | "m" => Some(Sex::Male),
            "F" | "f" => Some(Sex::Female),
            _ => None,
        }
    }
}

/// One case of the cohort.
///
/// `severe` is stored for every subject; only RT-PCR-positive subjects ever
/// contribute to the severity metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: SubjectId,
    pub features: Vec<f64>,
    pub age_bin: u8,
    pub sex: Sex,
    pub rtpcr_positive: bool,
    pub severe: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CohortViolation {
    DuplicateId {
        subject_id: SubjectId,
    },
    /// Ids travel over the line-based data shim, so they must be non-empty
    /// and free of whitespace.
    MalformedId {
        subject_id: SubjectId,
    },
    FeatureLength {
        subject_id: SubjectId,
        expected: usize,
        found: usize,
    },
    NonFiniteFeature {
        subject_id: SubjectId,
        index: usize,
    },
    AgeBinOutOfRange {
        subject_id: SubjectId,
        age_bin: u8,
    },
}

impl CohortViolation {
    pub fn subject_id(&self) -> &SubjectId {
        match self {
            CohortViolation::DuplicateId { subject_id }
            | CohortViolation::MalformedId { subject_id }
            | CohortViolation::FeatureLength { subject_id, .. }
            | CohortViolation::NonFiniteFeature { subject_id, .. }
            | CohortViolation::AgeBinOutOfRange { subject_id, .. } => subject_id,
        }
    }
}

/// Scans a cohort for invariant violations. An empty report means the cohort
/// is well formed.
pub fn validate_cohort(records: &[SubjectRecord]) -> Vec<CohortViolation> {
    let mut report = Vec::new();
    let mut seen: HashMap<&SubjectId, usize> = HashMap::new();
    let expected_dim = records.first().map(|r| r.features.len());

    for record in records {
        let id = &record.subject_id;
        let count = seen.entry(id).or_insert(0);
        *count += 1;
        if *count == 2 {
            report.push(CohortViolation::DuplicateId {
                subject_id: id.clone(),
            });
        }
        if id.as_str().is_empty() || id.as_str().chars().any(char::is_whitespace) {
            report.push(CohortViolation::MalformedId {
                subject_id: id.clone(),
            });
        }
        if let Some(expected) = expected_dim {
            if record.features.len() != expected {
                report.push(CohortViolation::FeatureLength {
                    subject_id: id.clone(),
                    expected,
                    found: record.features.len(),
                });
            }
        }
        if let Some(index) = record.features.iter().position(|v| !v.is_finite()) {
            report.push(CohortViolation::NonFiniteFeature {
                subject_id: id.clone(),
                index,
            });
        }
        if record.age_bin > MAX_AGE_BIN {
            report.push(CohortViolation::AgeBinOutOfRange {
                subject_id: id.clone(),
                age_bin: record.age_bin,
            });
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Team {
    pub team_id: TeamId,
    pub member_ids: BTreeSet<ParticipantId>,
    pub display_name: String,
}

/// Registry enforcing that no participant belongs to two teams.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeamRegistry {
    teams: BTreeMap<TeamId, Team>,
    membership: BTreeMap<ParticipantId, TeamId>,
}

impl TeamRegistry {
    pub fn check(&self, team: &Team) -> Result<(), DomainError> {
        if self.teams.contains_key(&team.team_id) {
            return Err(DomainError::DuplicateTeam(team.team_id.clone()));
        }
        for member in &team.member_ids {
            if let Some(existing) = self.membership.get(member) {
                return Err(DomainError::TeamOverlap {
                    participant: member.clone(),
                    existing: existing.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn add(&mut self, team: Team) -> Result<(), DomainError> {
        self.check(&team)?;
        for member in &team.member_ids {
            self.membership.insert(member.clone(), team.team_id.clone());
        }
        self.teams.insert(team.team_id.clone(), team);
        Ok(())
    }

    pub fn get(&self, id: &TeamId) -> Option<&Team> {
        self.teams.get(id)
    }

    pub fn contains(&self, id: &TeamId) -> bool {
        self.teams.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Team> {
        self.teams.values()
    }

    pub fn len(&self) -> usize {
        self.teams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teams.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionKind {
    InferenceAlgorithm,
    TrainingCodebase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTarget {
    RollingA1,
    FinalA2,
    FtRound1,
    FtFeedback,
    FtRound2,
}

impl fmt::Display for PhaseTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PhaseTarget::RollingA1 => "rolling_a1",
            PhaseTarget::FinalA2 => "final_a2",
            PhaseTarget::FtRound1 => "ft_round1",
            PhaseTarget::FtFeedback => "ft_feedback",
            PhaseTarget::FtRound2 => "ft_round2",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionStatus {
    Pending,
    Running,
    Completed,
    Failed,
    Rejected,
    Renounced,
}

impl SubmissionStatus {
    /// Legal lifecycle edges. `Failed -> Renounced` is allowed so that a team
    /// whose first training round crashed can still renounce it when entering
    /// the second round.
    pub fn can_transition_to(self, to: SubmissionStatus) -> bool {
        use SubmissionStatus::*;
        matches!(
            (self, to),
            (Pending, Running)
                | (Pending, Rejected)
                | (Running, Completed)
                | (Running, Failed)
                | (Completed, Renounced)
                | (Failed, Renounced)
        )
    }

    pub fn is_terminal(self) -> bool {
        !matches!(self, SubmissionStatus::Pending | SubmissionStatus::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub submission_id: SubmissionId,
    pub team_id: TeamId,
    pub kind: SubmissionKind,
    pub phase_target: PhaseTarget,
    pub submitted_at: Timestamp,
    pub status: SubmissionStatus,
    /// Adapter specification standing in for the participant's code.
    pub payload_ref: String,
}

impl Submission {
    pub fn new(
        submission_id: impl Into<SubmissionId>,
        team_id: impl Into<TeamId>,
        kind: SubmissionKind,
        phase_target: PhaseTarget,
        submitted_at: Timestamp,
        payload_ref: impl Into<String>,
    ) -> Self {
        Self {
            submission_id: submission_id.into(),
            team_id: team_id.into(),
            kind,
            phase_target,
            submitted_at,
            status: SubmissionStatus::Pending,
            payload_ref: payload_ref.into(),
        }
    }

    pub fn transition(&mut self, to: SubmissionStatus) -> Result<(), DomainError> {
        if !self.status.can_transition_to(to) {
            return Err(DomainError::IllegalTransition {
                from: self.status,
                to,
            });
        }
        self.status = to;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_presence: f64,
    pub p_severity: f64,
}

impl Prediction {
    pub fn check(&self) -> Result<(), String> {
        for (name, p) in [
            ("p_presence", self.p_presence),
            ("p_severity", self.p_severity),
        ] {
            if !p.is_finite() {
                return Err(format!("{name} is not finite"));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name}={p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub submission_id: SubmissionId,
    pub entries: BTreeMap<SubjectId, Prediction>,
}

impl PredictionSet {
    pub fn new(submission_id: impl Into<SubmissionId>) -> Self {
        Self {
            submission_id: submission_id.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Inserts a prediction after range validation. Out-of-range values are
    /// rejected, never clamped.
    pub fn insert(
        &mut self,
        subject: SubjectId,
        prediction: Prediction,
    ) -> Result<(), DomainError> {
        prediction
            .check()
            .map_err(|reason| DomainError::InvalidPrediction {
                subject: subject.clone(),
                reason,
            })?;
        self.entries.insert(subject, prediction);
        Ok(())
    }

    pub fn get(&self, subject: &SubjectId) -> Option<&Prediction> {
        self.entries.get(subject)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Subjects from `expected` with no entry.
    pub fn missing<'a>(&self, expected: impl IntoIterator<Item = &'a SubjectId>) -> Vec<SubjectId> {
        expected
            .into_iter()
            .filter(|id| !self.entries.contains_key(*id))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceBudget {
    #[serde(with = "duration_secs")]
    pub wall_clock_limit: Duration,
    pub worker_count: u32,
    pub scratch_quota: u64,
}

impl ResourceBudget {
    pub fn new(
        wall_clock_limit: Duration,
        worker_count: u32,
        scratch_quota: u64,
    ) -> Result<Self, DomainError> {
        let budget = Self {
            wall_clock_limit,
            worker_count,
            scratch_quota,
        };
        budget.validate()?;
        Ok(budget)
    }

    pub fn hours(hours: u64) -> Self {
        Self {
            wall_clock_limit: Duration::from_secs(hours * 3600),
            worker_count: 16,
            scratch_quota: 2_000 * 1_000_000_000,
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.wall_clock_limit.is_zero() {
            return Err(DomainError::InvalidBudget(
                "wall_clock_limit must be positive".into(),
            ));
        }
        if self.worker_count == 0 {
            return Err(DomainError::InvalidBudget(
                "worker_count must be positive".into(),
            ));
        }
        if self.scratch_quota == 0 {
            return Err(DomainError::InvalidBudget(
                "scratch_quota must be positive".into(),
            ));
        }
        Ok(())
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// Named subsets of a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    TrainingA,
    TestA1,
    TestA2,
    TestB,
    TrainingB,
}

impl SplitName {
    pub const ALL: [SplitName; 5] = [
        SplitName::TrainingA,
        SplitName::TestA1,
        SplitName::TestA2,
        SplitName::TestB,
        SplitName::TrainingB,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::TrainingA => "training_A",
            SplitName::TestA1 => "test_A1",
            SplitName::TestA2 => "test_A2",
            SplitName::TestB => "test_B",
            SplitName::TrainingB => "training_B",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SplitName::ALL.into_iter().find(|n| {
            n.as_str().eq_ignore_ascii_case(s) || format!("{n:?}").eq_ignore_ascii_case(s)
        })
    }

    /// Whether the subset is held by organizers and never shown to participants.
    pub fn is_sequestered(self) -> bool {
        !matches!(self, SplitName::TrainingA)
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub submission_id: SubmissionId,
    #[serde(with = "six_places")]
    pub auc_severity: f64,
    #[serde(with = "six_places")]
    pub auc_presence: f64,
    pub roc_severity: Vec<(f64, f64)>,
    #[serde(with = "six_places_pair")]
    pub ci_severity: (f64, f64),
    pub n_eval_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov_ab: f64,
    pub z: f64,
    pub p_value: f64,
    /// Set when the pooled variance vanished while the AUCs differ.
    #[serde(default)]
    pub degenerate: bool,
}

/// Rounds to six decimal places, the precision of published report values.
pub fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

pub(crate) mod six_places {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(super::round6(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d)
    }
}

pub(crate) mod six_places_pair {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &(f64, f64), s: S) -> Result<S::Ok, S::Error> {
        (super::round6(v.0), super::round6(v.1)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(f64, f64), D::Error> {
        <(f64, f64)>::deserialize(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> SubjectRecord {
        SubjectRecord {
            subject_id: id.into(),
            features: vec![0.1, 0.2],
            age_bin: 4,
            sex: Sex::Female,
            rtpcr_positive: true,
            severe: false,
        }
    }

    #[test]
    fn duplicate_ids_are_reported() {
        let report = validate_cohort(&[record("s1"), record("s1"), record("s2")]);
        assert_eq!(
            report,
            vec![CohortViolation::DuplicateId {
                subject_id: "s1".into()
            }]
        );
    }

    #[test]
    fn empty_cohort_is_valid() {
        assert!(validate_cohort(&[]).is_empty());
    }

    #[test]
    fn feature_length_and_age_violations() {
        let mut bad = record("s2");
        bad.features.push(1.0);
        bad.age_bin = 9;
        let report = validate_cohort(&[record("s1"), bad]);
        assert_eq!(report.len(), 2);
        assert!(report.iter().all(|v| v.subject_id().as_str() == "s2"));
    }

    #[test]
    fn teams_must_not_overlap() {
        let mut registry = TeamRegistry::default();
        let team = |id: &str, members: &[&str]| Team {
            team_id: id.into(),
            member_ids: members.iter().map(|m| ParticipantId::from(*m)).collect(),
            display_name: id.to_owned(),
        };
        registry.add(team("t1", &["alice", "bob"])).unwrap();
        let err = registry.add(team("t2", &["carol", "bob"])).unwrap_err();
        assert!(matches!(err, DomainError::TeamOverlap { .. }));
        assert_eq!(registry.len(), 1);
        registry.add(team("t2", &["carol"])).unwrap();
    }

    #[test]
    fn submission_lifecycle_edges() {
        let mut s = Submission::new(
            "x",
            "t",
            SubmissionKind::TrainingCodebase,
            PhaseTarget::FtRound1,
            0,
            "logistic",
        );
        assert!(s.transition(SubmissionStatus::Completed).is_err());
        s.transition(SubmissionStatus::Running).unwrap();
        s.transition(SubmissionStatus::Completed).unwrap();
        s.transition(SubmissionStatus::Renounced).unwrap();
        assert!(s.transition(SubmissionStatus::Running).is_err());
    }

    #[test]
    fn predictions_are_validated_not_clamped() {
        let mut set = PredictionSet::new("sub");
        let err = set
            .insert(
                "s1".into(),
                Prediction {
                    p_presence: 1.2,
                    p_severity: 0.5,
                },
            )
            .unwrap_err();
        assert!(matches!(err, DomainError::InvalidPrediction { .. }));
        assert!(set
            .insert(
                "s1".into(),
                Prediction {
                    p_presence: f64::NAN,
                    p_severity: 0.5
                }
            )
            .is_err());
        assert!(set.is_empty());
    }

    #[test]
    fn budgets_must_be_positive() {
        assert!(ResourceBudget::new(Duration::ZERO, 1, 1).is_err());
        assert!(ResourceBudget::new(Duration::from_secs(1), 0, 1).is_err());
        assert!(ResourceBudget::new(Duration::from_secs(1), 1, 0).is_err());
        assert!(ResourceBudget::new(Duration::from_secs(1), 1, 1).is_ok());
    }
}
