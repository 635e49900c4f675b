use std::collections::BTreeSet;

use crate::domain::{Prediction, PredictionSet, SubjectId, SubmissionId};

use super::MetricsError;

fn mean(values: &[f64]) -> f64 {
    // identical members reproduce their value bit for bit
    if values.windows(2).all(|w| w[0] == w[1]) {
        return values[0];
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-subject arithmetic mean of both probabilities over all member sets.
pub fn ensemble_mean(
    sets: &[&PredictionSet],
    submission_id: SubmissionId,
) -> Result<PredictionSet, MetricsError> {
    let first = sets
        .first()
        .ok_or_else(|| MetricsError::Alignment("ensemble of zero prediction sets".into()))?;
    let union: BTreeSet<&SubjectId> = sets.iter().flat_map(|s| s.entries.keys()).collect();
    let missing: Vec<SubjectId> = union
        .iter()
        .filter(|id| sets.iter().any(|s| !s.entries.contains_key(**id)))
        .map(|id| (*id).clone())
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().map(SubjectId::as_str).collect();
        return Err(MetricsError::Alignment(format!(
            "subjects not covered by every member: {}",
            shown.join(", ")
        )));
    }

    let mut out = PredictionSet::new(submission_id);
    for id in first.entries.keys() {
        let presence: Vec<f64> = sets.iter().map(|s| s.entries[id].p_presence).collect();
        let severity: Vec<f64> = sets.iter().map(|s| s.entries[id].p_severity).collect();
        out.entries.insert(
            id.clone(),
            Prediction {
                p_presence: mean(&presence),
                p_severity: mean(&severity),
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(entries: &[(&str, f64, f64)]) -> PredictionSet {
        let mut s = PredictionSet::new("m");
        for (id, a, b) in entries {
            s.insert(
                (*id).into(),
                Prediction {
                    p_presence: *a,
                    p_severity: *b,
                },
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn identical_members_are_idempotent() {
        let a = set(&[("s1", 0.1, 0.7), ("s2", 0.3, 0.3)]);
        let out = ensemble_mean(&[&a, &a, &a], "m".into()).unwrap();
        assert_eq!(out.entries, a.entries);
    }

    #[test]
    fn averages_per_subject() {
        let a = set(&[("s1", 0.5, 0.2)]);
        let b = set(&[("s1", 0.5, 0.6)]);
        let out = ensemble_mean(&[&a, &b], "e".into()).unwrap();
        assert!((out.entries[&SubjectId::from("s1")].p_severity - 0.4).abs() < 1e-15);
    }

    #[test]
    fn coverage_mismatch_lists_ids() {
        let a = set(&[("s1", 0.5, 0.2), ("s2", 0.5, 0.2)]);
        let b = set(&[("s1", 0.5, 0.6), ("s3", 0.5, 0.6)]);
        let err = ensemble_mean(&[&a, &b], "e".into()).unwrap_err();
        let MetricsError::Alignment(msg) = err else {
            panic!()
        };
        assert!(msg.contains("s2") && msg.contains("s3"));
        assert!(ensemble_mean(&[], "e".into()).is_err());
    }
}
