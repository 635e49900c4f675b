//! Percentile bootstrap for the AUC.
//!
//! Replicate `k` draws from its own ChaCha stream `(seed, k)`, so a replicate
//! does not depend on how many redraws earlier replicates needed, and the
//! loop could be spread over threads without changing results.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{
    auc_scores, class_counts, roc_curve_scores, split_samples, MetricsError, ScoredSample,
};

pub const BOOTSTRAP_ITERATIONS: usize = 1000;
pub const CI_LOWER: f64 = 0.025;
pub const CI_UPPER: f64 = 0.975;
/// Single-class replicates are redrawn up to this many times the iteration
/// count, in total, before giving up.
const REDRAW_FACTOR: usize = 10;

fn for_each_replicate(
    scores: &[f64],
    labels: &[bool],
    iterations: usize,
    seed: u64,
    cap: usize,
    mut visit: impl FnMut(&[f64], &[bool]) -> Result<(), MetricsError>,
) -> Result<(), MetricsError> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(MetricsError::Degenerate(format!(
            "bootstrap needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let n = scores.len();
    let mut redraws = 0;
    let mut rs = vec![0.0; n];
    let mut rl = vec![false; n];
    for k in 0..iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        loop {
            for j in 0..n {
                let i = rng.random_range(0..n);
                rs[j] = scores[i];
                rl[j] = labels[i];
            }
            let (p, q) = class_counts(&rl);
            if p > 0 && q > 0 {
                break;
            }
            redraws += 1;
            if redraws > cap {
                return Err(MetricsError::BootstrapExhausted { redraws });
            }
        }
        visit(&rs, &rl)?;
    }
    Ok(())
}

/// Replicate AUCs, in replicate order.
pub fn bootstrap_distribution(
    samples: &[ScoredSample],
    iterations: usize,
    seed: u64,
) -> Result<Vec<f64>, MetricsError> {
    let (scores, labels) = split_samples(samples);
    let mut out = Vec::with_capacity(iterations);
    for_each_replicate(
        &scores,
        &labels,
        iterations,
        seed,
        REDRAW_FACTOR * iterations,
        |s, l| {
            out.push(auc_scores(s, l)?);
            Ok(())
        },
    )?;
    Ok(out)
}

/// ROC curve of every replicate, for consumers that build confidence bands.
pub fn bootstrap_roc_replicates(
    samples: &[ScoredSample],
    iterations: usize,
    seed: u64,
) -> Result<Vec<Vec<(f64, f64)>>, MetricsError> {
    let (scores, labels) = split_samples(samples);
    let mut out = Vec::with_capacity(iterations);
    for_each_replicate(
        &scores,
        &labels,
        iterations,
        seed,
        REDRAW_FACTOR * iterations,
        |s, l| {
            out.push(roc_curve_scores(s, l)?);
            Ok(())
        },
    )?;
    Ok(out)
}

/// Empirical quantile with linear interpolation between order statistics
/// (position `q * (n - 1)`).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 2.5% and 97.5% percentiles of the bootstrap AUC distribution.
pub fn bootstrap_ci(
    samples: &[ScoredSample],
    iterations: usize,
    seed: u64,
) -> Result<(f64, f64), MetricsError> {
    if iterations == 0 {
        return Err(MetricsError::Degenerate(
            "bootstrap needs at least one iteration".into(),
        ));
    }
    let mut dist = bootstrap_distribution(samples, iterations, seed)?;
    dist.sort_by(f64::total_cmp);
    Ok((percentile(&dist, CI_LOWER), percentile(&dist, CI_UPPER)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(labels: &[bool], scores: &[f64]) -> Vec<ScoredSample> {
        labels
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(i, (l, s))| ScoredSample::new(format!("s{i}"), *s, *l))
            .collect()
    }

    #[test]
    fn perfect_classifier_gives_unit_interval() {
        let s = samples(
            &[false, false, true, true, true],
            &[0.1, 0.2, 0.7, 0.8, 0.9],
        );
        for seed in [0, 1, 99] {
            assert_eq!(bootstrap_ci(&s, 1000, seed).unwrap(), (1.0, 1.0));
        }
    }

    #[test]
    fn two_subjects_redraw_to_unit_interval() {
        let s = samples(&[true, false], &[0.9, 0.1]);
        assert_eq!(bootstrap_ci(&s, 1000, 5).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn exhaustion_when_redraw_cap_is_hit() {
        // With one case per class half of all draws are single-class, so a
        // cap of zero redraws is exceeded almost surely within 50 replicates.
        let err =
            for_each_replicate(&[0.9, 0.1], &[true, false], 50, 1, 0, |_, _| Ok(())).unwrap_err();
        assert_eq!(err, MetricsError::BootstrapExhausted { redraws: 1 });
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 0.025), 24.975);
        assert!((percentile(&v, 0.975) - 974.025).abs() < 1e-9);
        assert_eq!(percentile(&[3.0], 0.5), 3.0);
    }

    #[test]
    fn replicates_are_seed_deterministic() {
        let labels: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
        let scores: Vec<f64> = (0..60).map(|i| ((i * 37) % 17) as f64).collect();
        let s = samples(&labels, &scores);
        let a = bootstrap_distribution(&s, 200, 42).unwrap();
        let b = bootstrap_distribution(&s, 200, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, bootstrap_distribution(&s, 200, 43).unwrap());
        // replicate k only depends on its own stream
        assert_eq!(&bootstrap_distribution(&s, 50, 42).unwrap()[..], &a[..50]);
        let rocs = bootstrap_roc_replicates(&s, 20, 42).unwrap();
        assert_eq!(rocs.len(), 20);
    }
}
