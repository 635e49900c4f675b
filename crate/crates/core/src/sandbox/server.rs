use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::domain::{JobMode, Prediction, PredictionSet, SubjectId, SubmissionId};

use super::protocol::{ErrorCode, Request, Response};
use super::{AccessOutcome, AuditEntry, DataField, DataSource};

pub(crate) enum Ending {
    Done,
    Failed(String),
}

/// Serves one job phase: a single subset in a single mode.
pub(crate) struct ShimServer {
    data: Arc<DataSource>,
    mode: JobMode,
    subset: Vec<SubjectId>,
    allowed: BTreeSet<SubjectId>,
    context: String,
    model_in: Option<Vec<u8>>,
    pub model_out: Option<Vec<u8>>,
    predictions: BTreeMap<SubjectId, (f64, f64)>,
    pub log: String,
    pub audit: Vec<AuditEntry>,
    pub ending: Option<Ending>,
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as i64)
}

impl ShimServer {
    pub fn new(
        data: Arc<DataSource>,
        mode: JobMode,
        subset: Vec<SubjectId>,
        seed: u64,
        workers: u32,
        scratch: &str,
        model_in: Option<Vec<u8>>,
    ) -> Self {
        let allowed = subset.iter().cloned().collect();
        Self {
            data,
            mode,
            subset,
            allowed,
            context: format!("{mode} {seed} {workers} {scratch}"),
            model_in,
            model_out: None,
            predictions: BTreeMap::new(),
            log: String::new(),
            audit: Vec::new(),
            ending: None,
        }
    }

    pub fn note(&mut self, line: &str) {
        self.log.push_str(line);
        self.log.push('\n');
    }

    fn record(&mut self, subject_id: &SubjectId, field: DataField, outcome: AccessOutcome) {
        self.audit.push(AuditEntry {
            mode: self.mode,
            subject_id: subject_id.clone(),
            field,
            at_ms: now_ms(),
            outcome,
        });
    }

    fn check_access(&mut self, id: &SubjectId, field: DataField) -> Option<Response> {
        if !self.allowed.contains(id) {
            self.record(id, field, AccessOutcome::Denied);
            return Some(Response::Err(
                ErrorCode::Denied,
                format!("{id} is not in this job's subset"),
            ));
        }
        if field == DataField::Labels && self.mode != JobMode::Train {
            self.record(id, field, AccessOutcome::Denied);
            return Some(Response::Err(
                ErrorCode::Mode,
                "labels are not available during inference".into(),
            ));
        }
        self.record(id, field, AccessOutcome::Served);
        None
    }

    fn wrong_mode(&self, what: &str) -> Response {
        Response::Err(
            ErrorCode::Mode,
            format!("{what} is not available in {} mode", self.mode),
        )
    }

    pub fn handle(&mut self, line: &str) -> Response {
        if self.ending.is_some() {
            return Response::Err(ErrorCode::State, "job already ended".into());
        }
        let request = match Request::parse(line) {
            Ok(r) => r,
            Err(message) => return Response::Err(ErrorCode::Syntax, message),
        };
        match request {
            Request::GetContext => Response::Ok(self.context.clone()),
            Request::GetSubjects => Response::Ok(
                self.subset
                    .iter()
                    .map(SubjectId::as_str)
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
            Request::GetFeatures(id) => {
                if let Some(refused) = self.check_access(&id, DataField::Features) {
                    return refused;
                }
                let record = &self.data.records[&id];
                let mut payload = format!("{} {}", record.age_bin, record.sex.code());
                for f in &record.features {
                    payload.push(' ');
                    payload.push_str(&f.to_string());
                }
                Response::Ok(payload)
            }
            Request::GetLabels(id) => {
                if let Some(refused) = self.check_access(&id, DataField::Labels) {
                    return refused;
                }
                let record = &self.data.records[&id];
                Response::Ok(format!(
                    "{} {}",
                    u8::from(record.rtpcr_positive),
                    u8::from(record.severe)
                ))
            }
            Request::GetModel => match (&self.mode, &self.model_in) {
                (JobMode::Infer, Some(bytes)) => Response::Ok(STANDARD.encode(bytes)),
                (JobMode::Infer, None) => {
                    Response::Err(ErrorCode::State, "no model supplied".into())
                }
                _ => self.wrong_mode("GET_MODEL"),
            },
            Request::PutModel(bytes) => {
                if self.mode != JobMode::Train {
                    return self.wrong_mode("PUT_MODEL");
                }
                if self.model_out.is_some() {
                    return Response::Err(ErrorCode::State, "model already stored".into());
                }
                self.model_out = Some(bytes);
                Response::Ok(String::new())
            }
            Request::PutPrediction {
                subject_id,
                p_presence,
                p_severity,
            } => {
                if self.mode != JobMode::Infer {
                    return self.wrong_mode("PUT_PREDICTION");
                }
                if !self.allowed.contains(&subject_id) {
                    return Response::Err(
                        ErrorCode::Denied,
                        format!("{subject_id} is not in this job's subset"),
                    );
                }
                if self.predictions.contains_key(&subject_id) {
                    return Response::Err(
                        ErrorCode::State,
                        format!("duplicate prediction for {subject_id}"),
                    );
                }
                self.predictions
                    .insert(subject_id, (p_presence, p_severity));
                Response::Ok(String::new())
            }
            Request::Log(text) => {
                self.note(&text);
                Response::Ok(String::new())
            }
            Request::Fail(message) => {
                self.note(&format!("error: {message}"));
                self.ending = Some(Ending::Failed(message));
                Response::Ok(String::new())
            }
            Request::Done => {
                self.ending = Some(Ending::Done);
                Response::Ok(String::new())
            }
        }
    }

    /// Checks coverage and ranges of the collected predictions. Errors name
    /// the offending subjects.
    pub fn prediction_set(&self, submission_id: &SubmissionId) -> Result<PredictionSet, String> {
        let mut set = PredictionSet::new(submission_id.clone());
        let mut invalid = Vec::new();
        for (id, (p1, p2)) in &self.predictions {
            let prediction = Prediction {
                p_presence: *p1,
                p_severity: *p2,
            };
            if set.insert(id.clone(), prediction).is_err() {
                invalid.push(format!("{id} ({p1}, {p2})"));
            }
        }
        if !invalid.is_empty() {
            return Err(format!(
                "invalid probabilities for {} subject(s): {}",
                invalid.len(),
                invalid.join(", ")
            ));
        }
        let missing = set.missing(&self.subset);
        if !missing.is_empty() {
            let ids: Vec<&str> = missing.iter().map(SubjectId::as_str).collect();
            return Err(format!(
                "missing predictions for {} subject(s): {}",
                missing.len(),
                ids.join(", ")
            ));
        }
        Ok(set)
    }
}
