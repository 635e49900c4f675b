//! CSV formats for labels, features and predictions.
//!
//! Label file: `PatientID,probCOVID,probSevere,age,sex` with 0/1 labels, the
//! age-bin index and `M`/`F`. Prediction file: `PatientID,probCOVID,probSevere`.
//! Features live in a sibling file `PatientID,f0,f1,...` so the label file
//! keeps its fixed header.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Prediction, PredictionSet, Sex, SubjectId, SubjectRecord, SubmissionId, MAX_AGE_BIN};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Invalid { line: u64, message: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    #[serde(rename = "PatientID")]
    patient_id: String,
    #[serde(rename = "probCOVID")]
    prob_covid: u8,
    #[serde(rename = "probSevere")]
    prob_severe: u8,
    age: u8,
    sex: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    #[serde(rename = "PatientID")]
    patient_id: String,
    #[serde(rename = "probCOVID")]
    prob_covid: f64,
    #[serde(rename = "probSevere")]
    prob_severe: f64,
}

fn flag(v: u8, line: u64, column: &str) -> Result<bool, FormatError> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(FormatError::Invalid {
            line,
            message: format!("{column} must be 0 or 1, got {other}"),
        }),
    }
}

pub fn write_labels<W: Write>(records: &[SubjectRecord], out: W) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(LabelRow {
            patient_id: r.subject_id.to_string(),
            prob_covid: r.rtpcr_positive as u8,
            prob_severe: r.severe as u8,
            age: r.age_bin,
            sex: r.sex.code().to_owned(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a label file. Records come back with empty feature vectors.
pub fn read_labels<R: Read>(input: R) -> Result<Vec<SubjectRecord>, FormatError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<LabelRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row?;
        let sex = Sex::from_code(&row.sex).ok_or_else(|| FormatError::Invalid {
            line,
            message: format!("sex must be M or F, got {:?}", row.sex),
        })?;
        if row.age > MAX_AGE_BIN {
            return Err(FormatError::Invalid {
                line,
                message: format!("age bin {} out of range", row.age),
            });
        }
        out.push(SubjectRecord {
            subject_id: row.patient_id.into(),
            features: Vec::new(),
            age_bin: row.age,
            sex,
            rtpcr_positive: flag(row.prob_covid, line, "probCOVID")?,
            severe: flag(row.prob_severe, line, "probSevere")?,
        });
    }
    Ok(out)
}

pub fn write_features<W: Write>(records: &[SubjectRecord], out: W) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    let dim = records.first().map_or(0, |r| r.features.len());
    let mut header = vec!["PatientID".to_owned()];
    header.extend((0..dim).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.subject_id.to_string()];
        row.extend(r.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Attaches features from a features file to already-loaded records.
pub fn read_features_into<R: Read>(
    input: R,
    records: &mut [SubjectRecord],
) -> Result<(), FormatError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut by_id: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row?;
        let id = row.get(0).unwrap_or_default().to_owned();
        let values = row
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>().map_err(|e| FormatError::Invalid {
                    line,
                    message: format!("feature {v:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        by_id.insert(id, values);
    }
    for r in records.iter_mut() {
        match by_id.remove(r.subject_id.as_str()) {
            Some(f) => r.features = f,
            None => {
                return Err(FormatError::Invalid {
                    line: 0,
                    message: format!("no features for subject {}", r.subject_id),
                })
            }
        }
    }
    Ok(())
}

/// Path of the features file that accompanies a label file.
pub fn features_path(labels: &Path) -> PathBuf {
    let stem = labels
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("cohort");
    labels.with_file_name(format!("{stem}.features.csv"))
}

/// Writes `labels` and its sibling features file.
pub fn save_cohort(path: &Path, records: &[SubjectRecord]) -> Result<(), FormatError> {
    write_labels(records, std::fs::File::create(path)?)?;
    write_features(records, std::fs::File::create(features_path(path))?)?;
    Ok(())
}

/// Loads a label file, plus features when the sibling file exists.
pub fn load_cohort(path: &Path) -> Result<Vec<SubjectRecord>, FormatError> {
    let mut records = read_labels(std::fs::File::open(path)?)?;
    let fpath = features_path(path);
    if fpath.exists() {
        read_features_into(std::fs::File::open(fpath)?, &mut records)?;
    }
    Ok(records)
}

pub fn write_predictions<W: Write>(set: &PredictionSet, out: W) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    for (id, p) in &set.entries {
        w.serialize(PredictionRow {
            patient_id: id.to_string(),
            prob_covid: p.p_presence,
            prob_severe: p.p_severity,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(
    input: R,
    submission_id: SubmissionId,
) -> Result<PredictionSet, FormatError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut set = PredictionSet::new(submission_id);
    for (i, row) in rdr.deserialize::<PredictionRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row?;
        let id = SubjectId::from(row.patient_id);
        if set.entries.contains_key(&id) {
            return Err(FormatError::Invalid {
                line,
                message: format!("duplicate prediction for {id}"),
            });
        }
        set.insert(
            id,
            Prediction {
                p_presence: row.prob_covid,
                p_severity: row.prob_severe,
            },
        )
        .map_err(|e| FormatError::Invalid {
            line,
            message: e.to_string(),
        })?;
    }
    Ok(set)
}
