use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::domain::{PredictionSet, SubjectId, SubjectRecord, TeamId};

use super::MetricsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplayFilter {
    Severe,
    NonSevere,
}

impl DisplayFilter {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "severe" => Some(DisplayFilter::Severe),
            "non_severe" | "non-severe" => Some(DisplayFilter::NonSevere),
            _ => None,
        }
    }
}

/// Per-team severity ranks of the displayed subjects. Ranks are computed over
/// every RT-PCR-positive subject (1 = most severe-looking), then columns are
/// restricted to one outcome class and ordered by ascending mean rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMatrix {
    pub team_ids: Vec<TeamId>,
    pub subject_ids: Vec<SubjectId>,
    /// `ranks[team][column]`
    pub ranks: Vec<Vec<u32>>,
    pub mean_ranks: Vec<f64>,
    pub n_eligible: usize,
}

pub fn rank_matrix(
    teams: &[(TeamId, &PredictionSet)],
    labels: &[SubjectRecord],
    filter: DisplayFilter,
) -> Result<RankMatrix, MetricsError> {
    let eligible: Vec<&SubjectRecord> = labels.iter().filter(|r| r.rtpcr_positive).collect();

    let mut team_ranks: Vec<HashMap<&SubjectId, u32>> = Vec::with_capacity(teams.len());
    for (team, preds) in teams {
        let mut scored = Vec::with_capacity(eligible.len());
        let mut missing = Vec::new();
        for r in &eligible {
            match preds.get(&r.subject_id) {
                Some(p) => scored.push((&r.subject_id, p.p_severity)),
                None => missing.push(r.subject_id.as_str()),
            }
        }
        if !missing.is_empty() {
            return Err(MetricsError::Alignment(format!(
                "team {team} lacks predictions for {}",
                missing.join(", ")
            )));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        team_ranks.push(
            scored
                .into_iter()
                .enumerate()
                .map(|(i, (id, _))| (id, i as u32 + 1))
                .collect(),
        );
    }

    let wanted = matches!(filter, DisplayFilter::Severe);
    let mut columns: Vec<(&SubjectId, f64)> = eligible
        .iter()
        .filter(|r| r.severe == wanted)
        .map(|r| {
            let total: u64 = team_ranks.iter().map(|t| t[&r.subject_id] as u64).sum();
            let mean = if teams.is_empty() {
                0.0
            } else {
                total as f64 / teams.len() as f64
            };
            (&r.subject_id, mean)
        })
        .collect();
    columns.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));

    let ranks = team_ranks
        .iter()
        .map(|t| columns.iter().map(|(id, _)| t[id]).collect())
        .collect();
    Ok(RankMatrix {
        team_ids: teams.iter().map(|(t, _)| t.clone()).collect(),
        subject_ids: columns.iter().map(|(id, _)| (*id).clone()).collect(),
        ranks,
        mean_ranks: columns.iter().map(|(_, m)| *m).collect(),
        n_eligible: eligible.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Prediction, Sex};

    fn record(id: &str, severe: bool) -> SubjectRecord {
        SubjectRecord {
            subject_id: id.into(),
            features: vec![],
            age_bin: 3,
            sex: Sex::Female,
            rtpcr_positive: true,
            severe,
        }
    }

    fn preds(scores: &[(&str, f64)]) -> PredictionSet {
        let mut s = PredictionSet::new("p");
        for (id, v) in scores {
            s.insert(
                (*id).into(),
                Prediction {
                    p_presence: 0.5,
                    p_severity: *v,
                },
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn single_team_rows_follow_scores() {
        let labels = vec![record("a", true), record("b", true), record("c", true)];
        let p = preds(&[("a", 0.2), ("b", 0.9), ("c", 0.5)]);
        let m = rank_matrix(&[("t".into(), &p)], &labels, DisplayFilter::Severe).unwrap();
        assert_eq!(m.ranks, vec![vec![1, 2, 3]]);
        assert_eq!(
            m.subject_ids,
            vec!["b".into(), "c".into(), "a".into()] as Vec<SubjectId>
        );
    }

    #[test]
    fn identical_teams_identical_rows() {
        let labels = vec![record("a", false), record("b", false), record("c", true)];
        let p = preds(&[("a", 0.2), ("b", 0.9), ("c", 0.5)]);
        let m = rank_matrix(
            &[("t1".into(), &p), ("t2".into(), &p)],
            &labels,
            DisplayFilter::NonSevere,
        )
        .unwrap();
        assert_eq!(m.ranks[0], m.ranks[1]);
        // non-severe columns only, ranks still computed over all eligible
        assert_eq!(m.ranks[0], vec![1, 3]);
    }

    #[test]
    fn ties_break_by_subject_id() {
        let labels = vec![record("b", true), record("a", true)];
        let p = preds(&[("a", 0.5), ("b", 0.5)]);
        let m = rank_matrix(&[("t".into(), &p)], &labels, DisplayFilter::Severe).unwrap();
        assert_eq!(
            m.subject_ids,
            vec![SubjectId::from("a"), SubjectId::from("b")]
        );
    }

    #[test]
    fn missing_prediction_is_alignment_error() {
        let labels = vec![record("a", true), record("b", true)];
        let p = preds(&[("a", 0.5)]);
        assert!(rank_matrix(&[("t".into(), &p)], &labels, DisplayFilter::Severe).is_err());
    }
}
