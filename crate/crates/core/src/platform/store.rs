//! On-disk layout of a challenge:
//!
//! ```text
//! <root>/events.log            append-only event log
//! <root>/cohort.csv            labels (+ cohort.features.csv)
//! <root>/split.csv             split manifest
//! <root>/policy.txt            optional redaction rules
//! <root>/payloads/<sha256>     submitted adapter payloads
//! <root>/models/<sha256>.bin   model bytes (+ .json manifest)
//! <root>/predictions/<job>.csv
//! <root>/reports/<job>.json    evaluation reports
//! <root>/logs/<job>.log        raw job logs, organizer filesystem only
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cohort::{read_split_manifest, write_split_manifest, DatasetSplit};
use crate::domain::io::{load_cohort, read_predictions, save_cohort, write_predictions};
use crate::domain::{JobId, PredictionSet, SubjectRecord, SubmissionId};
use crate::sandbox::{content_hash, ModelArtifact, ModelManifest};

use super::eval::EvalReport;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Format(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("not found: {0}")]
    NotFound(String),
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn is_hash(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

/// Ids become file names; anything path-like is refused.
fn safe_name(s: &str) -> Result<&str, StoreError> {
    if s.is_empty() || s.contains(['/', '\\']) || s.starts_with('.') {
        return Err(StoreError::NotFound(s.to_owned()));
    }
    Ok(s)
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for dir in ["payloads", "models", "predictions", "reports", "logs"] {
            fs::create_dir_all(root.join(dir))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join("events.log")
    }

    pub fn scratch_root(&self) -> PathBuf {
        self.root.join("scratch")
    }

    fn cohort_path(&self) -> PathBuf {
        self.root.join("cohort.csv")
    }

    fn split_path(&self) -> PathBuf {
        self.root.join("split.csv")
    }

    pub fn save_data(
        &self,
        cohort: &[SubjectRecord],
        split: &DatasetSplit,
    ) -> Result<(), StoreError> {
        save_cohort(&self.cohort_path(), cohort).map_err(|e| StoreError::Format(e.to_string()))?;
        write_split_manifest(split, fs::File::create(self.split_path())?)
            .map_err(|e| StoreError::Format(e.to_string()))
    }

    pub fn load_data(&self) -> Result<(Vec<SubjectRecord>, DatasetSplit), StoreError> {
        let cohort =
            load_cohort(&self.cohort_path()).map_err(|e| StoreError::Format(e.to_string()))?;
        let split = read_split_manifest(fs::File::open(self.split_path())?)
            .map_err(|e| StoreError::Format(e.to_string()))?;
        Ok((cohort, split))
    }

    pub fn policy_text(&self) -> Result<Option<String>, StoreError> {
        match fs::read_to_string(self.root.join("policy.txt")) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save_policy_text(&self, text: &str) -> Result<(), StoreError> {
        Ok(fs::write(self.root.join("policy.txt"), text)?)
    }

    /// Stores an adapter payload and returns its content hash, which serves
    /// as the submission's payload reference.
    pub fn put_payload(&self, payload: &str) -> Result<String, StoreError> {
        let hash = content_hash(payload.as_bytes());
        let path = self.root.join("payloads").join(&hash);
        if !path.exists() {
            write_atomic(&path, payload.as_bytes())?;
        }
        Ok(hash)
    }

    pub fn payload(&self, payload_ref: &str) -> Result<String, StoreError> {
        if !is_hash(payload_ref) {
            return Err(StoreError::NotFound(format!("payload {payload_ref}")));
        }
        let bytes = read_or_missing(&self.root.join("payloads").join(payload_ref), "payload")?;
        if content_hash(&bytes) != payload_ref {
            return Err(StoreError::Integrity(format!("payload {payload_ref}")));
        }
        String::from_utf8(bytes)
            .map_err(|_| StoreError::Format(format!("payload {payload_ref} is not text")))
    }

    pub fn put_model(&self, model: &ModelArtifact) -> Result<(), StoreError> {
        if !model.verify() {
            return Err(StoreError::Integrity(format!(
                "model {}",
                model.model_ref()
            )));
        }
        let dir = self.root.join("models");
        let manifest = serde_json::to_vec_pretty(&model.manifest)
            .map_err(|e| StoreError::Format(e.to_string()))?;
        write_atomic(
            &dir.join(format!("{}.bin", model.model_ref())),
            &model.bytes,
        )?;
        write_atomic(&dir.join(format!("{}.json", model.model_ref())), &manifest)?;
        Ok(())
    }

    /// Loads a model and checks its bytes against the hash it is stored under.
    pub fn model(&self, model_ref: &str) -> Result<ModelArtifact, StoreError> {
        if !is_hash(model_ref) {
            return Err(StoreError::NotFound(format!("model {model_ref}")));
        }
        let dir = self.root.join("models");
        let bytes = read_or_missing(&dir.join(format!("{model_ref}.bin")), "model")?;
        let manifest: ModelManifest = serde_json::from_slice(&read_or_missing(
            &dir.join(format!("{model_ref}.json")),
            "model manifest",
        )?)
        .map_err(|e| StoreError::Format(e.to_string()))?;
        let artifact = ModelArtifact { manifest, bytes };
        if artifact.model_ref() != model_ref || !artifact.verify() {
            return Err(StoreError::Integrity(format!("model {model_ref}")));
        }
        Ok(artifact)
    }

    fn job_file(&self, dir: &str, job_id: &JobId, ext: &str) -> Result<PathBuf, StoreError> {
        Ok(self
            .root
            .join(dir)
            .join(format!("{}.{ext}", safe_name(job_id.as_str())?)))
    }

    pub fn put_predictions(&self, job_id: &JobId, set: &PredictionSet) -> Result<(), StoreError> {
        let mut buf = Vec::new();
        write_predictions(set, &mut buf).map_err(|e| StoreError::Format(e.to_string()))?;
        write_atomic(&self.job_file("predictions", job_id, "csv")?, &buf)
    }

    pub fn predictions(
        &self,
        job_id: &JobId,
        submission_id: SubmissionId,
    ) -> Result<PredictionSet, StoreError> {
        let bytes = read_or_missing(&self.job_file("predictions", job_id, "csv")?, "predictions")?;
        read_predictions(bytes.as_slice(), submission_id)
            .map_err(|e| StoreError::Format(e.to_string()))
    }

    pub fn put_report(&self, job_id: &JobId, report: &EvalReport) -> Result<(), StoreError> {
        let json =
            serde_json::to_vec_pretty(report).map_err(|e| StoreError::Format(e.to_string()))?;
        write_atomic(&self.job_file("reports", job_id, "json")?, &json)
    }

    pub fn report(&self, job_id: &JobId) -> Result<EvalReport, StoreError> {
        let bytes = read_or_missing(&self.job_file("reports", job_id, "json")?, "report")?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Format(e.to_string()))
    }

    pub fn put_raw_log(&self, job_id: &JobId, log: &str) -> Result<(), StoreError> {
        write_atomic(&self.job_file("logs", job_id, "log")?, log.as_bytes())
    }

    pub fn raw_log(&self, job_id: &JobId) -> Result<String, StoreError> {
        let bytes = read_or_missing(&self.job_file("logs", job_id, "log")?, "log")?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

fn read_or_missing(path: &Path, what: &str) -> Result<Vec<u8>, StoreError> {
    fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => StoreError::NotFound(format!("{what} {}", path.display())),
        _ => StoreError::Io(e),
    })
}

/// Writes through a uniquely named temporary file in the same directory, so
/// concurrent writers of one content-addressed file never share a temp path.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
