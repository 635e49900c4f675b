//! Organizer-mediated release of training logs from sequestered data.
//!
//! Redaction is conservative and only assists: it masks subject ids, paths,
//! numbers on lines that talk about performance, and whole lines that print
//! label values. A human then releases (optionally after editing) or
//! withholds each item exactly once.

use aho_corasick::{AhoCorasick, MatchKind};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{JobId, TeamId, Timestamp};

pub const SUBJECT_PLACEHOLDER: &str = "[SUBJECT]";
pub const PATH_PLACEHOLDER: &str = "[PATH]";
pub const NUMBER_PLACEHOLDER: &str = "[NUM]";
pub const LINE_PLACEHOLDER: &str = "[REDACTED LINE]";
pub const WITHHELD_NOTICE: &str = "training failed; details withheld";

pub const DEFAULT_PERF_KEYWORDS: [&str; 6] = ["auc", "loss", "accuracy", "score", "tp", "fp"];
const DEFAULT_PATH_PATTERN: &str = r"(?:[A-Za-z]:)?(?:[/\\][\w.\-]+){2,}";
const DEFAULT_LABEL_LINE_PATTERN: &str = r"(?i)\b(?:label|labels|severe|severity|outcome|rtpcr|rt-pcr|probsevere|probcovid|ground[ _-]?truth)\b\s*[:=]";
const NUMBER_PATTERN: &str = r"(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReviewError {
    #[error("policy line {line}: {message}")]
    Policy { line: usize, message: String },
    #[error("review item {0} was already decided")]
    AlreadyDecided(String),
    #[error("{0} is not an organizer")]
    Unauthorized(String),
    #[error("no review item {0}")]
    NotFound(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleId {
    SubjectId,
    Path,
    Performance,
    LabelLine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoFlag {
    pub rule_id: RuleId,
    /// Byte range of the placeholder in the redacted text.
    pub span: (usize, usize),
}

/// Redaction rules. The plain-text policy format is one rule per line,
/// `<action> <pattern>`, with actions `subject`, `path`, `perf-keyword` and
/// `label-line`; `#` starts a comment.
#[derive(Debug, Clone)]
pub struct RedactionPolicy {
    pub sequestered_ids: Vec<String>,
    pub subject_patterns: Vec<Regex>,
    pub path_patterns: Vec<Regex>,
    pub perf_keywords: Vec<String>,
    pub label_line_patterns: Vec<Regex>,
}

impl Default for RedactionPolicy {
    fn default() -> Self {
        Self {
            sequestered_ids: Vec::new(),
            subject_patterns: Vec::new(),
            path_patterns: vec![Regex::new(DEFAULT_PATH_PATTERN).expect("static pattern")],
            perf_keywords: DEFAULT_PERF_KEYWORDS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            label_line_patterns: vec![
                Regex::new(DEFAULT_LABEL_LINE_PATTERN).expect("static pattern")
            ],
        }
    }
}

impl RedactionPolicy {
    pub fn with_sequestered_ids(
        mut self,
        ids: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        self.sequestered_ids.extend(ids.into_iter().map(Into::into));
        self
    }

    /// Parses a policy file. Rules add to the defaults.
    pub fn parse(text: &str) -> Result<Self, ReviewError> {
        let mut policy = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (action, pattern) =
                line.split_once(char::is_whitespace)
                    .ok_or_else(|| ReviewError::Policy {
                        line: i + 1,
                        message: "expected `<action> <pattern>`".into(),
                    })?;
            let pattern = pattern.trim();
            let compile = |p: &str| {
                Regex::new(p).map_err(|e| ReviewError::Policy {
                    line: i + 1,
                    message: e.to_string(),
                })
            };
            match action {
                "subject" => policy.subject_patterns.push(compile(pattern)?),
                "path" => policy.path_patterns.push(compile(pattern)?),
                "perf-keyword" => policy.perf_keywords.push(pattern.to_lowercase()),
                "label-line" => policy.label_line_patterns.push(compile(pattern)?),
                other => {
                    return Err(ReviewError::Policy {
                        line: i + 1,
                        message: format!("unknown action {other:?}"),
                    })
                }
            }
        }
        Ok(policy)
    }

    /// Compiles the policy once for redacting many logs.
    pub fn redactor(&self) -> Redactor<'_> {
        let ids = (!self.sequestered_ids.is_empty()).then(|| {
            AhoCorasick::builder()
                .match_kind(MatchKind::LeftmostLongest)
                .build(&self.sequestered_ids)
                .expect("literal patterns")
        });
        let keywords: Vec<String> = self
            .perf_keywords
            .iter()
            .map(|k| regex::escape(k))
            .collect();
        let perf = Regex::new(&format!(
            "(?i)(?:^|[^a-z])(?:{})(?:[^a-z]|$)",
            keywords.join("|")
        ))
        .expect("escaped keywords");
        Redactor {
            policy: self,
            ids,
            perf,
            number: Regex::new(NUMBER_PATTERN).expect("static pattern"),
        }
    }
}

pub struct Redactor<'a> {
    policy: &'a RedactionPolicy,
    ids: Option<AhoCorasick>,
    perf: Regex,
    number: Regex,
}

enum Segment {
    Text(String),
    Masked(RuleId, &'static str),
}

fn mask_text(
    segments: Vec<Segment>,
    mut split: impl FnMut(&str) -> Vec<(usize, usize)>,
    rule: RuleId,
    placeholder: &'static str,
) -> Vec<Segment> {
    let mut out = Vec::with_capacity(segments.len());
    for seg in segments {
        match seg {
            Segment::Text(text) => {
                let mut last = 0;
                for (start, end) in split(&text) {
                    if start > last {
                        out.push(Segment::Text(text[last..start].to_owned()));
                    }
                    out.push(Segment::Masked(rule, placeholder));
                    last = end;
                }
                if last < text.len() {
                    out.push(Segment::Text(text[last..].to_owned()));
                }
            }
            masked => out.push(masked),
        }
    }
    out
}

fn joined(segments: &[Segment]) -> String {
    segments
        .iter()
        .map(|s| match s {
            Segment::Text(t) => t.as_str(),
            Segment::Masked(_, p) => p,
        })
        .collect()
}

fn regex_spans(patterns: &[Regex]) -> impl FnMut(&str) -> Vec<(usize, usize)> + '_ {
    move |text: &str| {
        // leftmost non-overlapping union of all patterns
        let mut spans: Vec<(usize, usize)> = patterns
            .iter()
            .flat_map(|re| re.find_iter(text).map(|m| (m.start(), m.end())))
            .filter(|(s, e)| e > s)
            .collect();
        spans.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for (s, e) in spans {
            match merged.last_mut() {
                Some(last) if s < last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        merged
    }
}

/// Redacts a raw log. Never fails; the empty log maps to the empty log.
pub fn redact(raw_log: &str, policy: &RedactionPolicy) -> (String, Vec<AutoFlag>) {
    policy.redactor().redact(raw_log)
}

impl Redactor<'_> {
    pub fn redact(&self, raw_log: &str) -> (String, Vec<AutoFlag>) {
        let compiled = self;
        let mut output = String::with_capacity(raw_log.len());
        let mut flags = Vec::new();

        for line in raw_log.split_inclusive('\n') {
            let (body, newline) = match line.strip_suffix('\n') {
                Some(b) => (b, "\n"),
                None => (line, ""),
            };
            let mut segments = vec![Segment::Text(body.to_owned())];
            if let Some(ac) = &compiled.ids {
                segments = mask_text(
                    segments,
                    |t| ac.find_iter(t).map(|m| (m.start(), m.end())).collect(),
                    RuleId::SubjectId,
                    SUBJECT_PLACEHOLDER,
                );
            }
            segments = mask_text(
                segments,
                regex_spans(&compiled.policy.subject_patterns),
                RuleId::SubjectId,
                SUBJECT_PLACEHOLDER,
            );
            segments = mask_text(
                segments,
                regex_spans(&compiled.policy.path_patterns),
                RuleId::Path,
                PATH_PLACEHOLDER,
            );

            // Decisions below look at the line as it reads after masking so that
            // a second pass reaches the same decisions.
            if compiled.perf.is_match(&joined(&segments)) {
                let number = &compiled.number;
                segments = mask_text(
                    segments,
                    |t| number.find_iter(t).map(|m| (m.start(), m.end())).collect(),
                    RuleId::Performance,
                    NUMBER_PLACEHOLDER,
                );
            }
            let current = joined(&segments);
            if compiled
                .policy
                .label_line_patterns
                .iter()
                .any(|re| re.is_match(&current))
            {
                segments = vec![Segment::Masked(RuleId::LabelLine, LINE_PLACEHOLDER)];
            }

            for seg in segments {
                match seg {
                    Segment::Text(t) => output.push_str(&t),
                    Segment::Masked(rule, placeholder) => {
                        let start = output.len();
                        output.push_str(placeholder);
                        flags.push(AutoFlag {
                            rule_id: rule,
                            span: (start, output.len()),
                        });
                    }
                }
            }
            output.push_str(newline);
        }
        (output, flags)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Released,
    Withheld,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewDecision {
    Release,
    Withhold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub job_id: JobId,
    pub team_id: TeamId,
    pub raw_log: String,
    pub redacted_log: String,
    pub auto_flags: Vec<AutoFlag>,
    pub status: ReviewStatus,
    pub reviewer_id: Option<String>,
    pub decided_at: Option<Timestamp>,
}

impl ReviewItem {
    pub fn new(
        item_id: String,
        job_id: JobId,
        team_id: TeamId,
        raw_log: String,
        policy: &RedactionPolicy,
    ) -> Self {
        let (redacted_log, auto_flags) = redact(&raw_log, policy);
        Self {
            item_id,
            job_id,
            team_id,
            raw_log,
            redacted_log,
            auto_flags,
            status: ReviewStatus::Pending,
            reviewer_id: None,
            decided_at: None,
        }
    }

    /// Applies a decision. Decisions are final; the second one fails.
    pub fn decide(
        &mut self,
        decision: ReviewDecision,
        reviewer_id: &str,
        edits: Option<String>,
        at: Timestamp,
    ) -> Result<(), ReviewError> {
        if self.status != ReviewStatus::Pending {
            return Err(ReviewError::AlreadyDecided(self.item_id.clone()));
        }
        if let Some(edited) = edits {
            self.redacted_log = edited;
        }
        self.status = match decision {
            ReviewDecision::Release => ReviewStatus::Released,
            ReviewDecision::Withhold => ReviewStatus::Withheld,
        };
        self.reviewer_id = Some(reviewer_id.to_owned());
        self.decided_at = Some(at);
        Ok(())
    }

    /// What the owning team may see. Never the raw log.
    pub fn participant_view(&self) -> ParticipantLog {
        match self.status {
            ReviewStatus::Pending => ParticipantLog::PendingReview,
            ReviewStatus::Released => ParticipantLog::Released {
                log: self.redacted_log.clone(),
            },
            ReviewStatus::Withheld => ParticipantLog::Withheld {
                notice: WITHHELD_NOTICE.to_owned(),
            },
        }
    }

    /// Organizer queue entry: redacted text and flags, without the raw log.
    pub fn queue_view(&self) -> ReviewQueueEntry {
        ReviewQueueEntry {
            item_id: self.item_id.clone(),
            job_id: self.job_id.clone(),
            team_id: self.team_id.clone(),
            redacted_log: self.redacted_log.clone(),
            auto_flags: self.auto_flags.clone(),
            status: self.status,
            reviewer_id: self.reviewer_id.clone(),
            decided_at: self.decided_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ParticipantLog {
    PendingReview,
    Released {
        log: String,
    },
    Withheld {
        notice: String,
    },
    /// Public-data jobs: the complete log, unreviewed.
    Full {
        log: String,
    },
    /// Scoring jobs on hidden test sets report no log.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueueEntry {
    pub item_id: String,
    pub job_id: JobId,
    pub team_id: TeamId,
    pub redacted_log: String,
    pub auto_flags: Vec<AutoFlag>,
    pub status: ReviewStatus,
    pub reviewer_id: Option<String>,
    pub decided_at: Option<Timestamp>,
}
