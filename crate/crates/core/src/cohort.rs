//! Synthetic cohorts and the disjoint training/test split sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Sex, SplitName, SubjectId, SubjectRecord};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid cohort configuration: {0}")]
    Config(String),
    #[error("cohort of {available} subjects cannot hold {required} sampled subjects")]
    Sizing { available: usize, required: usize },
    #[error("split manifest: {0}")]
    Manifest(String),
}

/// Parameters of the synthetic generative model.
///
/// RT-PCR status is Bernoulli(`prevalence_presence`) and shifts the second
/// feature by `presence_signal`. Among RT-PCR-positive subjects the latent
/// severity risk is
/// `intercept + age_effect*age_bin + sex_effect*[male] + feature_signal*features[0] + noise`
/// with `noise ~ N(0, noise_sd)`, and severity is Bernoulli(sigmoid(risk)).
/// The intercept is solved per cohort so that the expected severe fraction
/// among positives equals `prevalence_severe_given_positive`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub prevalence_presence: f64,
    pub prevalence_severe_given_positive: f64,
    pub age_effect: f64,
    pub sex_effect: f64,
    pub feature_signal: f64,
    #[serde(default = "default_presence_signal")]
    pub presence_signal: f64,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
}

fn default_presence_signal() -> f64 {
    1.0
}

fn default_noise_sd() -> f64 {
    1.0
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 1000,
            feature_dim: 8,
            seed: 0,
            prevalence_presence: 0.65,
            prevalence_severe_given_positive: 0.2,
            age_effect: 0.35,
            sex_effect: 0.5,
            feature_signal: 1.5,
            presence_signal: default_presence_signal(),
            noise_sd: default_noise_sd(),
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), CohortError> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.n_subjects == 0 {
            return Err(CohortError::Config("n_subjects must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(CohortError::Config("feature_dim must be positive".into()));
        }
        if !open_unit(self.prevalence_presence) {
            return Err(CohortError::Config(
                "prevalence_presence must lie in (0, 1)".into(),
            ));
        }
        if !open_unit(self.prevalence_severe_given_positive) {
            return Err(CohortError::Config(
                "prevalence_severe_given_positive must lie in (0, 1)".into(),
            ));
        }
        let weights = [
            self.age_effect,
            self.sex_effect,
            self.feature_signal,
            self.presence_signal,
            self.noise_sd,
        ];
        if weights.iter().any(|w| !w.is_finite()) || self.noise_sd < 0.0 {
            return Err(CohortError::Config(
                "effect weights must be finite, noise_sd >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Deterministic part of the latent severity risk, without intercept.
    pub fn risk_score(&self, age_bin: u8, sex: Sex, features: &[f64]) -> f64 {
        self.age_effect * age_bin as f64
            + self.sex_effect * if sex == Sex::Male { 1.0 } else { 0.0 }
            + self.feature_signal * features.first().copied().unwrap_or(0.0)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Relative frequency of the decade bins 0..=8, skewed towards older ages.
const AGE_WEIGHTS: [f64; 9] = [1.0, 2.0, 4.0, 6.0, 8.0, 9.0, 8.0, 6.0, 4.0];

pub fn subject_id_for(index: usize) -> SubjectId {
    SubjectId::new(format!("s{index:04}"))
}

pub fn generate_cohort(config: &CohortConfig) -> Result<Vec<SubjectRecord>, CohortError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ages = WeightedIndex::new(AGE_WEIGHTS).expect("static weights");

    let mut records = Vec::with_capacity(config.n_subjects);
    let mut latent = Vec::with_capacity(config.n_subjects);
    let mut uniforms = Vec::with_capacity(config.n_subjects);
    for i in 0..config.n_subjects {
        let age_bin = ages.sample(&mut rng) as u8;
        let sex = if rng.random_bool(0.5) {
            Sex::Male
        } else {
            Sex::Female
        };
        let rtpcr_positive = rng.random_bool(config.prevalence_presence);
        let mut features: Vec<f64> = (0..config.feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        if rtpcr_positive && features.len() > 1 {
            features[1] += config.presence_signal;
        }
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * config.noise_sd;
        latent.push(config.risk_score(age_bin, sex, &features) + noise);
        uniforms.push(rng.random::<f64>());
        records.push(SubjectRecord {
            subject_id: subject_id_for(i),
            features,
            age_bin,
            sex,
            rtpcr_positive,
            severe: false,
        });
    }

    let positive_risk: Vec<f64> = records
        .iter()
        .zip(&latent)
        .filter(|(r, _)| r.rtpcr_positive)
        .map(|(_, l)| *l)
        .collect();
    let intercept = solve_intercept(&positive_risk, config.prevalence_severe_given_positive);
    for ((record, risk), u) in records.iter_mut().zip(&latent).zip(&uniforms) {
        record.severe = record.rtpcr_positive && *u < sigmoid(intercept + risk);
    }
    Ok(records)
}

/// Bisection for the intercept `b` with `mean(sigmoid(b + risk)) = target`.
fn solve_intercept(risk: &[f64], target: f64) -> f64 {
    if risk.is_empty() {
        return 0.0;
    }
    let mean_at = |b: f64| risk.iter().map(|r| sigmoid(b + r)).sum::<f64>() / risk.len() as f64;
    let (mut lo, mut hi) = (-100.0_f64, 100.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub size_training_a: usize,
    pub size_test_a1: usize,
    pub size_test_a2: usize,
    pub size_test_b: usize,
    pub seed: u64,
    /// Keeps the (RT-PCR, severity) class mix of every subset close to the
    /// cohort mix. Off by default.
    #[serde(default)]
    pub stratify: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            size_training_a: 2000,
            size_test_a1: 200,
            size_test_a2: 800,
            size_test_b: 1011,
            seed: 0,
            stratify: false,
        }
    }
}

impl SplitConfig {
    pub fn required(&self) -> usize {
        self.size_training_a + self.size_test_a1 + self.size_test_a2 + self.size_test_b
    }
}

/// Named subsets over a cohort. `universe` lists every subject that passed
/// the pre-split filter; `discarded` the ones that did not.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub subsets: BTreeMap<SplitName, Vec<SubjectId>>,
    pub universe: Vec<SubjectId>,
    #[serde(default)]
    pub discarded: Vec<SubjectId>,
}

impl DatasetSplit {
    pub fn subset(&self, name: SplitName) -> &[SubjectId] {
        self.subsets.get(&name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn sizes(&self) -> BTreeMap<SplitName, usize> {
        SplitName::ALL
            .iter()
            .map(|n| (*n, self.subset(*n).len()))
            .collect()
    }
}

pub fn sample_splits(
    cohort: &[SubjectRecord],
    config: &SplitConfig,
) -> Result<DatasetSplit, CohortError> {
    sample_splits_filtered(cohort, config, |_| true)
}

/// Splits the subjects accepted by `keep`. The filter stands in for the
/// discard step applied to unusable cases before sampling.
pub fn sample_splits_filtered(
    cohort: &[SubjectRecord],
    config: &SplitConfig,
    keep: impl Fn(&SubjectRecord) -> bool,
) -> Result<DatasetSplit, CohortError> {
    let (kept, discarded): (Vec<&SubjectRecord>, Vec<&SubjectRecord>) =
        cohort.iter().partition(|r| keep(r));
    let required = config.required();
    if kept.len() < required {
        return Err(CohortError::Sizing {
            available: kept.len(),
            required,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let order: Vec<usize> = if config.stratify {
        stratified_order(&kept, &mut rng)
    } else {
        let mut idx: Vec<usize> = (0..kept.len()).collect();
        idx.shuffle(&mut rng);
        idx
    };

    let mut cursor = 0;
    let mut take = |n: usize| {
        let ids: Vec<SubjectId> = order[cursor..cursor + n]
            .iter()
            .map(|&i| kept[i].subject_id.clone())
            .collect();
        cursor += n;
        ids
    };
    let test_b = take(config.size_test_b);
    let test_a2 = take(config.size_test_a2);
    let test_a1 = take(config.size_test_a1);
    let training_a = take(config.size_training_a);

    let test_b_set: BTreeSet<&SubjectId> = test_b.iter().collect();
    let training_b: Vec<SubjectId> = kept
        .iter()
        .map(|r| &r.subject_id)
        .filter(|id| !test_b_set.contains(id))
        .cloned()
        .collect();

    let mut subsets = BTreeMap::new();
    subsets.insert(SplitName::TrainingA, training_a);
    subsets.insert(SplitName::TestA1, test_a1);
    subsets.insert(SplitName::TestA2, test_a2);
    subsets.insert(SplitName::TestB, test_b);
    subsets.insert(SplitName::TrainingB, training_b);
    Ok(DatasetSplit {
        subsets,
        universe: kept.iter().map(|r| r.subject_id.clone()).collect(),
        discarded: discarded.iter().map(|r| r.subject_id.clone()).collect(),
    })
}

/// An ordering in which every prefix holds each (RT-PCR, severity) stratum in
/// roughly its cohort proportion.
fn stratified_order(kept: &[&SubjectRecord], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut strata: BTreeMap<(bool, bool), Vec<usize>> = BTreeMap::new();
    for (i, r) in kept.iter().enumerate() {
        strata
            .entry((r.rtpcr_positive, r.severe))
            .or_default()
            .push(i);
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(kept.len());
    for members in strata.values_mut() {
        members.shuffle(rng);
        let n = members.len() as f64;
        for (rank, &i) in members.iter().enumerate() {
            let jitter: f64 = rng.random();
            keyed.push(((rank as f64 + jitter) / n, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitViolation {
    Overlap {
        first: SplitName,
        second: SplitName,
        subject_id: SubjectId,
    },
    NotContained {
        subset: SplitName,
        superset: SplitName,
        subject_id: SubjectId,
    },
    Unassigned {
        subject_id: SubjectId,
    },
    Unknown {
        subset: SplitName,
        subject_id: SubjectId,
    },
    Duplicate {
        subset: SplitName,
        subject_id: SubjectId,
    },
}

const DISJOINT_PAIRS: [(SplitName, SplitName); 7] = [
    (SplitName::TrainingA, SplitName::TestA1),
    (SplitName::TrainingA, SplitName::TestA2),
    (SplitName::TrainingA, SplitName::TestB),
    (SplitName::TestA1, SplitName::TestA2),
    (SplitName::TestA1, SplitName::TestB),
    (SplitName::TestA2, SplitName::TestB),
    (SplitName::TrainingB, SplitName::TestB),
];

pub fn validate_split(split: &DatasetSplit) -> Vec<SplitViolation> {
    let mut report = Vec::new();
    let sets: HashMap<SplitName, BTreeSet<&SubjectId>> = SplitName::ALL
        .iter()
        .map(|n| (*n, split.subset(*n).iter().collect()))
        .collect();
    let universe: BTreeSet<&SubjectId> = split.universe.iter().collect();

    for name in SplitName::ALL {
        let mut seen = BTreeSet::new();
        for id in split.subset(name) {
            if !seen.insert(id) {
                report.push(SplitViolation::Duplicate {
                    subset: name,
                    subject_id: id.clone(),
                });
            }
            if !universe.contains(id) {
                report.push(SplitViolation::Unknown {
                    subset: name,
                    subject_id: id.clone(),
                });
            }
        }
    }
    for (a, b) in DISJOINT_PAIRS {
        // iterate in subset order so reports are stable
        for id in split.subset(a) {
            if sets[&b].contains(id) {
                report.push(SplitViolation::Overlap {
                    first: a,
                    second: b,
                    subject_id: id.clone(),
                });
            }
        }
    }
    for id in split.subset(SplitName::TrainingA) {
        if !sets[&SplitName::TrainingB].contains(id) {
            report.push(SplitViolation::NotContained {
                subset: SplitName::TrainingA,
                superset: SplitName::TrainingB,
                subject_id: id.clone(),
            });
        }
    }
    for id in &split.universe {
        if !sets.values().any(|s| s.contains(id)) {
            report.push(SplitViolation::Unassigned {
                subject_id: id.clone(),
            });
        }
    }
    report
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    subject_id: String,
    subset: String,
}

const DISCARDED: &str = "discarded";

/// Writes the `subject_id,subset` manifest: one row per membership, so
/// training_B rows are explicit.
pub fn write_split_manifest<W: Write>(split: &DatasetSplit, out: W) -> Result<(), CohortError> {
    let mut w = csv::Writer::from_writer(out);
    let mut write = |id: &SubjectId, subset: &str| {
        w.serialize(ManifestRow {
            subject_id: id.to_string(),
            subset: subset.to_owned(),
        })
        .map_err(|e| CohortError::Manifest(e.to_string()))
    };
    for name in SplitName::ALL {
        for id in split.subset(name) {
            write(id, name.as_str())?;
        }
    }
    for id in &split.discarded {
        write(id, DISCARDED)?;
    }
    w.flush()
        .map_err(|e| CohortError::Manifest(e.to_string()))?;
    Ok(())
}

pub fn read_split_manifest<R: Read>(input: R) -> Result<DatasetSplit, CohortError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut split = DatasetSplit::default();
    let mut universe = BTreeSet::new();
    let mut universe_order = Vec::new();
    for row in rdr.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| CohortError::Manifest(e.to_string()))?;
        let id = SubjectId::from(row.subject_id);
        if row.subset == DISCARDED {
            split.discarded.push(id);
            continue;
        }
        let name = SplitName::parse(&row.subset)
            .ok_or_else(|| CohortError::Manifest(format!("unknown subset {:?}", row.subset)))?;
        if universe.insert(id.clone()) {
            universe_order.push(id.clone());
        }
        split.subsets.entry(name).or_default().push(id);
    }
    universe_order.sort();
    split.universe = universe_order;
    Ok(split)
}
