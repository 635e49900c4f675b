use crate::domain::{PredictionSet, SubjectRecord};

use super::{class_counts, split_samples, MetricsError, ScoredSample};

/// Midranks (1-based, ties share the average rank) in input order.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share ranks i+1..=j+1
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Alignment(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(MetricsError::Degenerate(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC over parallel score/label slices, O(N log N).
pub fn auc_scores(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let (m, n) = check_inputs(scores, labels)?;
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(r, _)| *r)
        .sum();
    let m_f = m as f64;
    Ok((rank_sum - m_f * (m_f + 1.0) / 2.0) / (m_f * n as f64))
}

pub fn auc(samples: &[ScoredSample]) -> Result<f64, MetricsError> {
    let (scores, labels) = split_samples(samples);
    auc_scores(&scores, &labels)
}

/// Which label a metric scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    /// Severe vs non-severe, RT-PCR-positive subjects only.
    Severity,
    /// RT-PCR positive vs negative, all subjects.
    Presence,
}

/// Pairs predictions with labels for the subjects an endpoint is computed over.
pub fn eligible_samples(
    preds: &PredictionSet,
    labels: &[SubjectRecord],
    endpoint: Endpoint,
) -> Result<Vec<ScoredSample>, MetricsError> {
    let mut samples = Vec::new();
    let mut missing = Vec::new();
    for record in labels {
        if endpoint == Endpoint::Severity && !record.rtpcr_positive {
            continue;
        }
        match preds.get(&record.subject_id) {
            Some(p) => {
                let (score, label) = match endpoint {
                    Endpoint::Severity => (p.p_severity, record.severe),
                    Endpoint::Presence => (p.p_presence, record.rtpcr_positive),
                };
                samples.push(ScoredSample {
                    subject_id: record.subject_id.clone(),
                    score,
                    label,
                });
            }
            None => missing.push(record.subject_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(MetricsError::Coverage { missing });
    }
    Ok(samples)
}

/// Severity AUC over RT-PCR-positive subjects; negatives are ignored entirely.
pub fn severity_auc(preds: &PredictionSet, labels: &[SubjectRecord]) -> Result<f64, MetricsError> {
    auc(&eligible_samples(preds, labels, Endpoint::Severity)?)
}

/// Presence AUC over all subjects, with RT-PCR status as the label.
pub fn presence_auc(preds: &PredictionSet, labels: &[SubjectRecord]) -> Result<f64, MetricsError> {
    auc(&eligible_samples(preds, labels, Endpoint::Presence)?)
}

/// Threshold sweep from the highest score down; tied scores move together.
pub fn roc_curve_scores(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let (m, n) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / m as f64));
    }
    Ok(drop_collinear(points))
}

/// Removes interior points that continue a purely vertical or horizontal
/// run. The area under the curve is unchanged.
fn drop_collinear(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for p in points {
        if out.len() >= 2 {
            let a = out[out.len() - 2];
            let b = out[out.len() - 1];
            if (a.0 == b.0 && b.0 == p.0) || (a.1 == b.1 && b.1 == p.1) {
                out.pop();
            }
        }
        out.push(p);
    }
    out
}

pub fn roc_curve(samples: &[ScoredSample]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let (scores, labels) = split_samples(samples);
    roc_curve_scores(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::domain::{Prediction, Sex};

    fn samples(labels: &[u8], scores: &[f64]) -> Vec<ScoredSample> {
        labels
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(i, (l, s))| ScoredSample::new(format!("s{i}"), *s, *l == 1))
            .collect()
    }

    // O(mn) pairwise kernel, the definition of the statistic
    fn brute_force(scores: &[f64], labels: &[bool]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (x, lx) in scores.iter().zip(labels) {
            if !lx {
                continue;
            }
            for (y, ly) in scores.iter().zip(labels) {
                if *ly {
                    continue;
                }
                pairs += 1.0;
                total += if x > y {
                    1.0
                } else if x == y {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / pairs
    }

    fn trapezoid(points: &[(f64, f64)]) -> f64 {
        points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    #[test]
    fn worked_example() {
        let s = samples(&[0, 0, 1, 1], &[0.1, 0.4, 0.35, 0.8]);
        assert_eq!(auc(&s).unwrap(), 0.75);
    }

    #[test]
    fn complete_ties_give_one_half() {
        let s = samples(&[0, 1, 0, 1, 1], &[0.3; 5]);
        assert_eq!(auc(&s).unwrap(), 0.5);
    }

    #[test]
    fn perfect_separation() {
        let s = samples(&[0, 0, 1, 1], &[0.1, 0.2, 0.3, 0.9]);
        assert_eq!(auc(&s).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_an_error() {
        let s = samples(&[1, 1], &[0.1, 0.2]);
        assert!(matches!(auc(&s), Err(MetricsError::Degenerate(_))));
        assert!(matches!(roc_curve(&s), Err(MetricsError::Degenerate(_))));
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn roc_of_perfect_and_tied_classifiers() {
        let perfect = samples(&[0, 0, 1, 1], &[0.1, 0.2, 0.3, 0.9]);
        assert_eq!(
            roc_curve(&perfect).unwrap(),
            vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
        );
        let tied = samples(&[0, 1, 0, 1], &[0.5; 4]);
        assert_eq!(roc_curve(&tied).unwrap(), vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn perfect_roc_passes_through_corner() {
        let perfect = samples(&[0, 1], &[0.1, 0.9]);
        assert_eq!(
            roc_curve(&perfect).unwrap(),
            vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
        );
    }

    fn record(id: &str, positive: bool, severe: bool) -> SubjectRecord {
        SubjectRecord {
            subject_id: id.into(),
            features: vec![],
            age_bin: 5,
            sex: Sex::Male,
            rtpcr_positive: positive,
            severe,
        }
    }

    fn preds(entries: &[(&str, f64, f64)]) -> PredictionSet {
        let mut set = PredictionSet::new("sub");
        for (id, p1, p2) in entries {
            set.insert(
                (*id).into(),
                Prediction {
                    p_presence: *p1,
                    p_severity: *p2,
                },
            )
            .unwrap();
        }
        set
    }

    #[test]
    fn severity_auc_filters_to_positives() {
        let labels = vec![
            record("a", true, false),
            record("b", true, false),
            record("c", true, true),
            record("d", true, true),
            record("n1", false, false),
            record("n2", false, false),
        ];
        let base = [
            ("a", 0.5, 0.1),
            ("b", 0.5, 0.4),
            ("c", 0.5, 0.35),
            ("d", 0.5, 0.8),
        ];
        let mut with_neg = base.to_vec();
        with_neg.extend([("n1", 0.5, 1.0), ("n2", 0.5, 0.0)]);
        assert_eq!(severity_auc(&preds(&with_neg), &labels).unwrap(), 0.75);
        let mut adversarial = base.to_vec();
        adversarial.extend([("n1", 0.5, 0.0), ("n2", 0.5, 1.0)]);
        assert_eq!(severity_auc(&preds(&adversarial), &labels).unwrap(), 0.75);
        // negatives need no prediction at all
        assert_eq!(severity_auc(&preds(&base), &labels[..4]).unwrap(), 0.75);
    }

    #[test]
    fn severity_auc_coverage_and_degeneracy() {
        let labels = vec![record("a", true, false), record("b", true, true)];
        let err = severity_auc(&preds(&[("a", 0.5, 0.1)]), &labels).unwrap_err();
        assert_eq!(
            err,
            MetricsError::Coverage {
                missing: vec!["b".into()]
            }
        );
        let negatives = vec![record("a", false, false), record("b", false, false)];
        assert!(matches!(
            severity_auc(&preds(&[("a", 0.5, 0.1), ("b", 0.5, 0.2)]), &negatives),
            Err(MetricsError::Degenerate(_))
        ));
    }

    #[test]
    fn presence_auc_perfect() {
        let labels = vec![
            record("a", true, false),
            record("b", false, false),
            record("c", true, true),
        ];
        let p = preds(&[("a", 0.9, 0.1), ("b", 0.1, 0.1), ("c", 0.8, 0.1)]);
        assert_eq!(presence_auc(&p, &labels).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn matches_pairwise_definition(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..50)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            let (p, n) = class_counts(&labels);
            prop_assume!(p > 0 && n > 0);
            let fast = auc_scores(&scores, &labels).unwrap();
            prop_assert!((fast - brute_force(&scores, &labels)).abs() <= 1e-12);
            let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
            prop_assert!((auc_scores(&scores, &flipped).unwrap() - (1.0 - fast)).abs() <= 1e-12);
            let roc = roc_curve_scores(&scores, &labels).unwrap();
            prop_assert!((trapezoid(&roc) - fast).abs() <= 1e-12);
            prop_assert!(roc.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
            prop_assert_eq!(roc[0], (0.0, 0.0));
            prop_assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
        }

        #[test]
        fn invariant_under_increasing_transforms(
            data in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| (s * 4.0).round() / 4.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            let (p, n) = class_counts(&labels);
            prop_assume!(p > 0 && n > 0);
            let base = auc_scores(&scores, &labels).unwrap();
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
            let ranks = midranks(&scores);
            for transformed in [exp, affine, ranks] {
                prop_assert!((auc_scores(&transformed, &labels).unwrap() - base).abs() <= 1e-12);
            }
        }
    }
}
