use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{
    six_places, six_places_pair, DelongResult, EvalResult, JobId, PredictionSet, SubjectRecord,
    SubmissionId, TeamId,
};
use crate::metrics::{
    auc, bootstrap_ci, delong_paired, eligible_samples, ensemble_mean, roc_curve, Endpoint,
    LeaderboardEntry, MetricsError, ScoredSample, BOOTSTRAP_ITERATIONS,
};
use crate::phase::Board;

/// Evaluation of one prediction set against one labelled subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub result: EvalResult,
    pub roc_presence: Vec<(f64, f64)>,
    pub n_subjects: usize,
    pub bootstrap_iterations: usize,
    pub bootstrap_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<JobId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub team_id: Option<TeamId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub board: Option<Board>,
}

/// Severity AUC over RT-PCR positives with its bootstrap interval, presence
/// AUC over everyone, and both ROC curves.
pub fn evaluate(
    preds: &PredictionSet,
    labels: &[SubjectRecord],
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    let severity = eligible_samples(preds, labels, Endpoint::Severity)?;
    let presence = eligible_samples(preds, labels, Endpoint::Presence)?;
    Ok(EvalReport {
        result: EvalResult {
            submission_id: preds.submission_id.clone(),
            auc_severity: auc(&severity)?,
            auc_presence: auc(&presence)?,
            roc_severity: roc_curve(&severity)?,
            ci_severity: bootstrap_ci(&severity, BOOTSTRAP_ITERATIONS, seed)?,
            n_eval_cases: severity.len(),
        },
        roc_presence: roc_curve(&presence)?,
        n_subjects: labels.len(),
        bootstrap_iterations: BOOTSTRAP_ITERATIONS,
        bootstrap_seed: seed,
        job_id: None,
        team_id: None,
        board: None,
    })
}

/// ROC points as `endpoint,fpr,tpr` rows for external plotting.
pub fn roc_csv(report: &EvalReport) -> String {
    let mut out = String::from("endpoint,fpr,tpr\n");
    for (endpoint, points) in [
        ("severity", &report.result.roc_severity),
        ("presence", &report.roc_presence),
    ] {
        for (fpr, tpr) in points {
            let _ = writeln!(out, "{endpoint},{fpr},{tpr}");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub members: Vec<TeamId>,
    #[serde(with = "six_places")]
    pub auc_severity: f64,
    #[serde(with = "six_places")]
    pub auc_presence: f64,
    #[serde(with = "six_places_pair")]
    pub ci_severity: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDelong {
    pub team_a: TeamId,
    pub team_b: TeamId,
    #[serde(flatten)]
    pub result: DelongResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub leaderboard: Vec<LeaderboardEntry>,
    /// Finalists with neither a Final nor a Qualification model.
    pub excluded: Vec<TeamId>,
    pub ensemble: Option<EnsembleReport>,
    /// Paired severity comparison of every pair of ranked teams.
    pub delong: Vec<PairwiseDelong>,
}

pub const ENSEMBLE_SIZE: usize = 3;

/// Builds the closing report from the ranked test-B board and each ranked
/// team's prediction set.
pub fn final_report(
    leaderboard: Vec<LeaderboardEntry>,
    sets: &BTreeMap<TeamId, PredictionSet>,
    labels: &[SubjectRecord],
    excluded: Vec<TeamId>,
    seed: u64,
) -> Result<FinalReport, MetricsError> {
    let set_of = |team: &TeamId| {
        sets.get(team)
            .ok_or_else(|| MetricsError::Alignment(format!("no test-B predictions for {team}")))
    };
    let ensemble = if leaderboard.len() >= 2 {
        let members: Vec<TeamId> = leaderboard
            .iter()
            .take(ENSEMBLE_SIZE)
            .map(|e| e.team_id.clone())
            .collect();
        let member_sets = members.iter().map(set_of).collect::<Result<Vec<_>, _>>()?;
        let mean = ensemble_mean(&member_sets, SubmissionId::new("ensemble"))?;
        let report = evaluate(&mean, labels, seed)?;
        Some(EnsembleReport {
            members,
            auc_severity: report.result.auc_severity,
            auc_presence: report.result.auc_presence,
            ci_severity: report.result.ci_severity,
        })
    } else {
        None
    };

    let severity: Vec<(TeamId, Vec<ScoredSample>)> = leaderboard
        .iter()
        .map(|e| {
            Ok((
                e.team_id.clone(),
                eligible_samples(set_of(&e.team_id)?, labels, Endpoint::Severity)?,
            ))
        })
        .collect::<Result<_, MetricsError>>()?;
    let mut delong = Vec::new();
    for (i, (team_a, a)) in severity.iter().enumerate() {
        for (team_b, b) in &severity[i + 1..] {
            let scores = |s: &[ScoredSample]| s.iter().map(|x| x.score).collect::<Vec<_>>();
            let labels: Vec<bool> = a.iter().map(|x| x.label).collect();
            delong.push(PairwiseDelong {
                team_a: team_a.clone(),
                team_b: team_b.clone(),
                result: delong_paired(&scores(a), &scores(b), &labels)?,
            });
        }
    }
    Ok(FinalReport {
        leaderboard,
        excluded,
        ensemble,
        delong,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Prediction, Sex};

    fn record(id: &str, positive: bool, severe: bool) -> SubjectRecord {
        SubjectRecord {
            subject_id: id.into(),
            features: vec![0.0],
            age_bin: 3,
            sex: Sex::Female,
            rtpcr_positive: positive,
            severe,
        }
    }

    #[test]
    fn worked_example_through_the_report() {
        // four positives as in the metric example, plus negatives that must not matter
        let labels = vec![
            record("a", true, false),
            record("b", true, false),
            record("c", true, true),
            record("d", true, true),
            record("e", false, false),
            record("f", false, false),
        ];
        let mut preds = PredictionSet::new("sub-1");
        for (id, pres, sev) in [
            ("a", 0.9, 0.1),
            ("b", 0.8, 0.4),
            ("c", 0.7, 0.35),
            ("d", 0.6, 0.8),
            ("e", 0.1, 0.99),
            ("f", 0.2, 0.0),
        ] {
            preds
                .insert(
                    id.into(),
                    Prediction {
                        p_presence: pres,
                        p_severity: sev,
                    },
                )
                .unwrap();
        }
        let report = evaluate(&preds, &labels, 1).unwrap();
        assert_eq!(report.result.auc_severity, 0.75);
        assert_eq!(report.result.auc_presence, 1.0);
        assert_eq!(report.result.n_eval_cases, 4);
        assert_eq!(report.n_subjects, 6);
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["auc_severity"], 0.75);
        assert!(roc_csv(&report).starts_with("endpoint,fpr,tpr\nseverity,0,0\n"));
    }
}
