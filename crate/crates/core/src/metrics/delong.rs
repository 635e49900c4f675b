//! Paired DeLong comparison of two correlated AUCs.
//!
//! Structural components come from the midrank formulation: for positive
//! `i`, `V10(i) = (Tz(i) - Tx(i)) / n`, and for negative `j`,
//! `V01(j) = 1 - (Tz(j) - Ty(j)) / m`, where `Tz` are midranks over all
//! subjects and `Tx`/`Ty` midranks within the positives/negatives. The whole
//! test is O(N log N).

use libm::erfc;

use crate::domain::DelongResult;

use super::{class_counts, midranks, MetricsError};

struct Components {
    theta: f64,
    v10: Vec<f64>,
    v01: Vec<f64>,
}

fn components(positives: &[f64], negatives: &[f64]) -> Components {
    let (m, n) = (positives.len(), negatives.len());
    let mut all = Vec::with_capacity(m + n);
    all.extend_from_slice(positives);
    all.extend_from_slice(negatives);
    let tz = midranks(&all);
    let tx = midranks(positives);
    let ty = midranks(negatives);
    let v10: Vec<f64> = (0..m).map(|i| (tz[i] - tx[i]) / n as f64).collect();
    let v01: Vec<f64> = (0..n)
        .map(|j| 1.0 - (tz[m + j] - ty[j]) / m as f64)
        .collect();
    let theta = v10.iter().sum::<f64>() / m as f64;
    Components { theta, v10, v01 }
}

/// Sample covariance with an n-1 divisor.
fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n - 1.0)
}

/// Two-sided p-value `2 * (1 - Phi(|z|))`, evaluated as `erfc(|z| / sqrt 2)`
/// to keep precision in the tail.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub fn delong_paired(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
) -> Result<DelongResult, MetricsError> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return Err(MetricsError::Alignment(format!(
            "score vectors of length {} and {} against {} labels",
            scores_a.len(),
            scores_b.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores_a.iter().chain(scores_b).position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i % labels.len().max(1)));
    }
    let (m, n) = class_counts(labels);
    if m < 2 || n < 2 {
        return Err(MetricsError::Degenerate(format!(
            "DeLong needs at least two of each class, got {m} positive and {n} negative"
        )));
    }

    let split = |scores: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let pos = scores
            .iter()
            .zip(labels)
            .filter(|(_, l)| **l)
            .map(|(s, _)| *s)
            .collect();
        let neg = scores
            .iter()
            .zip(labels)
            .filter(|(_, l)| !**l)
            .map(|(s, _)| *s)
            .collect();
        (pos, neg)
    };
    let (xa, ya) = split(scores_a);
    let (xb, yb) = split(scores_b);
    let a = components(&xa, &ya);
    let b = components(&xb, &yb);

    let (m_f, n_f) = (m as f64, n as f64);
    let var_a = covariance(&a.v10, &a.v10) / m_f + covariance(&a.v01, &a.v01) / n_f;
    let var_b = covariance(&b.v10, &b.v10) / m_f + covariance(&b.v01, &b.v01) / n_f;
    let cov_ab = covariance(&a.v10, &b.v10) / m_f + covariance(&a.v01, &b.v01) / n_f;

    Ok(finish(a.theta, b.theta, var_a, var_b, cov_ab))
}

fn finish(auc_a: f64, auc_b: f64, var_a: f64, var_b: f64, cov_ab: f64) -> DelongResult {
    let diff = auc_a - auc_b;
    let pooled = var_a + var_b - 2.0 * cov_ab;
    let (z, p_value, degenerate) = if diff == 0.0 {
        (0.0, 1.0, false)
    } else if pooled <= f64::EPSILON * (var_a + var_b) {
        (diff.signum() * f64::INFINITY, 0.0, true)
    } else {
        let z = diff / pooled.sqrt();
        (z, two_sided_p(z), false)
    };
    DelongResult {
        auc_a,
        auc_b,
        var_a,
        var_b,
        cov_ab,
        z,
        p_value,
        degenerate,
    }
}
