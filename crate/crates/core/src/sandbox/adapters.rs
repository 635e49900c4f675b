//! Built-in solution adapters. The first five are reference solutions; the
//! rest are fixtures that misbehave in specific ways for testing the runner.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{sigmoid, CohortConfig};
use crate::domain::{JobMode, Sex, SubjectId};

use super::protocol::{JobContext, Shim, ShimError, SubjectFeatures};

/// Reference adapters shipped for end-to-end runs.
pub const REFERENCE_ADAPTERS: [&str; 5] = [
    "constant",
    "noise",
    "logistic",
    "logistic-l2",
    "naive-bayes",
];

const DEFAULT_L2: f64 = 1e-3;
const STRONG_L2: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterSpec {
    Constant(f64),
    /// Uniform random scores from the job seed.
    Noise,
    /// Logistic regression on features, age bin and sex.
    Logistic {
        l2: f64,
    },
    /// Gaussian naive Bayes on the same inputs.
    NaiveBayes,
    /// Scores with the generator's own risk weights. Test use only.
    Oracle {
        age: f64,
        sex: f64,
        feature: f64,
    },
    Fail(String),
    Sleep(f64),
    Scratch(u64),
    OutOfRange,
    /// Probes subjects outside its subset, and labels during inference.
    Adversarial,
    /// Fails training when given more than this many subjects.
    FailAbove(usize),
    /// Logistic, but prints subject ids, paths, labels and metrics.
    Leaky,
    Crash,
}

impl AdapterSpec {
    pub fn parse(spec: &str) -> Result<Self, String> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let number = |what: &str| -> Result<f64, String> {
            let raw = arg.ok_or_else(|| format!("adapter {name} needs {what}"))?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("adapter {name}: bad {what} {raw:?}"))
        };
        let no_arg = |a: AdapterSpec| match arg {
            None => Ok(a),
            Some(_) => Err(format!("adapter {name} takes no argument")),
        };
        match name {
            "constant" => Ok(AdapterSpec::Constant(if arg.is_some() {
                number("a probability")?
            } else {
                0.5
            })),
            "noise" => no_arg(AdapterSpec::Noise),
            "logistic" => no_arg(AdapterSpec::Logistic { l2: DEFAULT_L2 }),
            "logistic-l2" => no_arg(AdapterSpec::Logistic { l2: STRONG_L2 }),
            "naive-bayes" => no_arg(AdapterSpec::NaiveBayes),
            "oracle" => match arg {
                None => {
                    let c = CohortConfig::default();
                    Ok(AdapterSpec::Oracle {
                        age: c.age_effect,
                        sex: c.sex_effect,
                        feature: c.feature_signal,
                    })
                }
                Some(raw) => {
                    let w: Vec<f64> = raw
                        .split(',')
                        .map(str::parse)
                        .collect::<Result<_, _>>()
                        .map_err(|_| format!("oracle weights {raw:?}"))?;
                    let [age, sex, feature] = w[..] else {
                        return Err("oracle takes <age>,<sex>,<feature>".into());
                    };
                    Ok(AdapterSpec::Oracle { age, sex, feature })
                }
            },
            "fail" => Ok(AdapterSpec::Fail(
                arg.unwrap_or("training crashed").to_owned(),
            )),
            "sleep" => Ok(AdapterSpec::Sleep(number("seconds")?.max(0.0))),
            "scratch" => Ok(AdapterSpec::Scratch(number("a byte count")?.max(0.0) as u64)),
            "out-of-range" => no_arg(AdapterSpec::OutOfRange),
            "adversarial" => no_arg(AdapterSpec::Adversarial),
            "fail-above" => Ok(AdapterSpec::FailAbove(
                number("a subject count")?.max(0.0) as usize
            )),
            "leaky" => no_arg(AdapterSpec::Leaky),
            "crash" => no_arg(AdapterSpec::Crash),
            other => Err(format!("unknown adapter {other:?}")),
        }
    }
}

impl fmt::Display for AdapterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterSpec::Constant(p) => write!(f, "constant:{p}"),
            AdapterSpec::Noise => f.write_str("noise"),
            AdapterSpec::Logistic { l2 } if *l2 == STRONG_L2 => f.write_str("logistic-l2"),
            AdapterSpec::Logistic { .. } => f.write_str("logistic"),
            AdapterSpec::NaiveBayes => f.write_str("naive-bayes"),
            AdapterSpec::Oracle { age, sex, feature } => write!(f, "oracle:{age},{sex},{feature}"),
            AdapterSpec::Fail(m) => write!(f, "fail:{m}"),
            AdapterSpec::Sleep(s) => write!(f, "sleep:{s}"),
            AdapterSpec::Scratch(b) => write!(f, "scratch:{b}"),
            AdapterSpec::OutOfRange => f.write_str("out-of-range"),
            AdapterSpec::Adversarial => f.write_str("adversarial"),
            AdapterSpec::FailAbove(n) => write!(f, "fail-above:{n}"),
            AdapterSpec::Leaky => f.write_str("leaky"),
            AdapterSpec::Crash => f.write_str("crash"),
        }
    }
}

type AdapterResult<T> = Result<T, String>;

fn shim_err(e: ShimError) -> String {
    e.to_string()
}

/// Runs one job phase against the shim: reads the context, trains or
/// infers, and finishes with `DONE`, or `FAIL` when the adapter errors.
/// Only transport failures are returned as errors.
pub fn run_adapter(spec: &AdapterSpec, shim: &mut Shim<'_>) -> Result<(), ShimError> {
    let ctx = shim.context()?;
    let outcome = match ctx.mode {
        JobMode::Train => {
            train(spec, shim, &ctx).and_then(|model| shim.put_model(model).map_err(shim_err))
        }
        JobMode::Infer => shim
            .model()
            .map_err(shim_err)
            .and_then(|model| infer(spec, &model, shim, &ctx)),
    };
    match outcome {
        Ok(()) => shim.done(),
        Err(message) => shim.fail(message),
    }
}

fn design(f: &SubjectFeatures) -> Vec<f64> {
    let mut x = f.features.clone();
    x.push(f.age_bin as f64);
    x.push(if f.sex == Sex::Male { 1.0 } else { 0.0 });
    x
}

struct TrainingData {
    ids: Vec<SubjectId>,
    x: Vec<Vec<f64>>,
    presence: Vec<bool>,
    severe: Vec<bool>,
}

fn load_training(shim: &mut Shim<'_>) -> AdapterResult<TrainingData> {
    let ids = shim.subjects().map_err(shim_err)?;
    let mut data = TrainingData {
        ids: Vec::with_capacity(ids.len()),
        x: Vec::with_capacity(ids.len()),
        presence: Vec::with_capacity(ids.len()),
        severe: Vec::with_capacity(ids.len()),
    };
    for id in ids {
        let f = shim.features(&id).map_err(shim_err)?;
        let (p, s) = shim.labels(&id).map_err(shim_err)?;
        data.x.push(design(&f));
        data.presence.push(p);
        data.severe.push(s);
        data.ids.push(id);
    }
    if data.ids.is_empty() {
        return Err("no training subjects".into());
    }
    Ok(data)
}

fn predict_all(
    shim: &mut Shim<'_>,
    mut score: impl FnMut(&[f64]) -> (f64, f64),
) -> AdapterResult<()> {
    for id in shim.subjects().map_err(shim_err)? {
        let f = shim.features(&id).map_err(shim_err)?;
        let (p1, p2) = score(&design(&f));
        shim.put_prediction(&id, p1, p2).map_err(shim_err)?;
    }
    Ok(())
}

fn constant_model(p: f64) -> Vec<u8> {
    format!("constant {p}").into_bytes()
}

fn train(spec: &AdapterSpec, shim: &mut Shim<'_>, ctx: &JobContext) -> AdapterResult<Vec<u8>> {
    match spec {
        AdapterSpec::Constant(p) => Ok(constant_model(*p)),
        AdapterSpec::Noise => Ok(b"noise".to_vec()),
        AdapterSpec::Oracle { .. } => Ok(b"oracle".to_vec()),
        AdapterSpec::OutOfRange => Ok(b"out-of-range".to_vec()),
        AdapterSpec::Logistic { l2 } => {
            let data = load_training(shim)?;
            shim.log(format!(
                "fitting logistic regression on {} subjects",
                data.ids.len()
            ))
            .map_err(shim_err)?;
            to_bytes(&LinearModel::fit(&data, *l2))
        }
        AdapterSpec::NaiveBayes => {
            let data = load_training(shim)?;
            to_bytes(&BayesModel::fit(&data))
        }
        AdapterSpec::Fail(message) => {
            shim.log("starting training").map_err(shim_err)?;
            Err(message.clone())
        }
        AdapterSpec::Sleep(seconds) => {
            let until = Instant::now() + Duration::from_secs_f64(*seconds);
            while Instant::now() < until {
                std::thread::sleep(Duration::from_millis(20));
                // heartbeat, so a cancelled job notices the closed channel
                shim.context().map_err(shim_err)?;
            }
            Ok(constant_model(0.5))
        }
        AdapterSpec::Scratch(bytes) => {
            write_scratch(Path::new(&ctx.scratch), *bytes)
                .map_err(|e| format!("scratch write failed: {e}"))?;
            Ok(constant_model(0.5))
        }
        AdapterSpec::Adversarial => {
            probe_outside(shim)?;
            Ok(constant_model(0.5))
        }
        AdapterSpec::FailAbove(limit) => {
            let n = shim.subjects().map_err(shim_err)?.len();
            if n > *limit {
                shim.log(format!("loading {n} subjects"))
                    .map_err(shim_err)?;
                return Err(format!("out of memory while loading {n} subjects"));
            }
            let data = load_training(shim)?;
            to_bytes(&LinearModel::fit(&data, DEFAULT_L2))
        }
        AdapterSpec::Leaky => {
            let data = load_training(shim)?;
            for (i, id) in data.ids.iter().take(3).enumerate() {
                shim.log(format!("loading /data/train/{id}.mha"))
                    .map_err(shim_err)?;
                shim.log(format!("subject {id} label: {}", u8::from(data.severe[i])))
                    .map_err(shim_err)?;
            }
            let model = LinearModel::fit(&data, DEFAULT_L2);
            shim.log(format!(
                "epoch 1 loss=0.{:04} auc=0.{:03}",
                data.ids.len() % 10_000,
                data.ids.len() % 1000
            ))
            .map_err(shim_err)?;
            if let Some(first) = data.ids.first() {
                shim.log(format!("warning: NaN gradient at {first}, skipping"))
                    .map_err(shim_err)?;
            }
            to_bytes(&model)
        }
        AdapterSpec::Crash => panic!("adapter crashed during training"),
    }
}

fn infer(
    spec: &AdapterSpec,
    model: &[u8],
    shim: &mut Shim<'_>,
    ctx: &JobContext,
) -> AdapterResult<()> {
    match spec {
        AdapterSpec::Constant(_)
        | AdapterSpec::Fail(_)
        | AdapterSpec::Sleep(_)
        | AdapterSpec::Scratch(_) => {
            let text = String::from_utf8_lossy(model);
            let p = text
                .strip_prefix("constant ")
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| "not a constant model".to_owned())?;
            if let AdapterSpec::Sleep(seconds) = spec {
                std::thread::sleep(Duration::from_secs_f64(seconds.min(0.05)));
            }
            predict_all(shim, |_| (p, p))
        }
        AdapterSpec::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            predict_all(shim, |_| (rng.random::<f64>(), rng.random::<f64>()))
        }
        AdapterSpec::Oracle { age, sex, feature } => predict_all(shim, |x| {
            let d = x.len();
            let risk = age * x[d - 2] + sex * x[d - 1] + feature * x[0];
            (sigmoid(x.get(1).copied().unwrap_or(0.0)), sigmoid(risk))
        }),
        AdapterSpec::OutOfRange => {
            let mut first = true;
            predict_all(shim, |_| {
                let p = if first { 1.2 } else { 0.5 };
                first = false;
                (0.5, p)
            })
        }
        AdapterSpec::Logistic { .. } | AdapterSpec::FailAbove(_) | AdapterSpec::Leaky => {
            let m: LinearModel = from_bytes(model)?;
            predict_all(shim, |x| m.predict(x))
        }
        AdapterSpec::NaiveBayes => {
            let m: BayesModel = from_bytes(model)?;
            predict_all(shim, |x| m.predict(x))
        }
        AdapterSpec::Adversarial => {
            probe_outside(shim)?;
            // A served label would make this a perfect predictor.
            for id in shim.subjects().map_err(shim_err)? {
                let p = match shim.labels(&id) {
                    Ok((p, s)) => (f64::from(u8::from(p)), f64::from(u8::from(s))),
                    Err(_) => (0.5, 0.5),
                };
                shim.put_prediction(&id, p.0, p.1).map_err(shim_err)?;
            }
            Ok(())
        }
        AdapterSpec::Crash => panic!("adapter crashed during inference"),
    }
}

/// Requests features and labels of ids that look like cohort ids but are
/// not in the subset, and records what the shim served.
fn probe_outside(shim: &mut Shim<'_>) -> AdapterResult<()> {
    let own: std::collections::BTreeSet<SubjectId> =
        shim.subjects().map_err(shim_err)?.into_iter().collect();
    let mut leaked = 0usize;
    let mut probes = 0usize;
    for i in 0..(2 * own.len() + 64) {
        let id = SubjectId::new(format!("s{i:04}"));
        if own.contains(&id) {
            continue;
        }
        probes += 1;
        if shim.features(&id).is_ok() {
            leaked += 1;
        }
        if shim.labels(&id).is_ok() {
            leaked += 1;
        }
    }
    for id in ["../etc/passwd", "*", "s-1"] {
        if shim.features(&SubjectId::new(id)).is_ok() {
            leaked += 1;
        }
    }
    shim.log(format!("probed {probes} outside ids, {leaked} served"))
        .map_err(shim_err)
}

fn write_scratch(dir: &Path, bytes: u64) -> std::io::Result<()> {
    let mut file = File::create(dir.join("intermediate.bin"))?;
    let chunk = vec![0u8; 1 << 20];
    let mut left = bytes;
    while left > 0 {
        let n = left.min(chunk.len() as u64) as usize;
        file.write_all(&chunk[..n])?;
        left -= n as u64;
    }
    file.sync_all()
}

fn to_bytes<T: Serialize>(model: &T) -> AdapterResult<Vec<u8>> {
    serde_json::to_vec(model).map_err(|e| e.to_string())
}

fn from_bytes<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> AdapterResult<T> {
    serde_json::from_slice(bytes).map_err(|e| format!("unreadable model: {e}"))
}

#[derive(Debug, Serialize, Deserialize)]
struct Standardizer {
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let sd = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-12 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, sd }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.sd)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Weights with the intercept last.
fn fit_logistic(x: &[Vec<f64>], y: &[bool], l2: f64) -> Vec<f64> {
    let d = x.first().map_or(0, Vec::len);
    let mut w = vec![0.0; d + 1];
    if x.is_empty() {
        return w;
    }
    let n = x.len() as f64;
    let rate = 0.5;
    for _ in 0..400 {
        let mut grad = vec![0.0; d + 1];
        for (row, &label) in x.iter().zip(y) {
            let z = w[d] + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = sigmoid(z) - f64::from(u8::from(label));
            for j in 0..d {
                grad[j] += err * row[j];
            }
            grad[d] += err;
        }
        for j in 0..d {
            w[j] -= rate * (grad[j] / n + l2 * w[j]);
        }
        w[d] -= rate * grad[d] / n;
    }
    w
}

fn linear(w: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    w[d] + x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
}

#[derive(Debug, Serialize, Deserialize)]
struct LinearModel {
    scale: Standardizer,
    presence: Vec<f64>,
    severity: Vec<f64>,
}

impl LinearModel {
    fn fit(data: &TrainingData, l2: f64) -> Self {
        let scale = Standardizer::fit(&data.x);
        let z: Vec<Vec<f64>> = data.x.iter().map(|r| scale.apply(r)).collect();
        let presence = fit_logistic(&z, &data.presence, l2);
        // severity is only scored among RT-PCR positives
        let (zp, sp): (Vec<Vec<f64>>, Vec<bool>) = z
            .iter()
            .zip(&data.presence)
            .zip(&data.severe)
            .filter(|((_, p), _)| **p)
            .map(|((r, _), s)| (r.clone(), *s))
            .unzip();
        let severity = fit_logistic(&zp, &sp, l2);
        Self {
            scale,
            presence,
            severity,
        }
    }

    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let z = self.scale.apply(x);
        (
            sigmoid(linear(&self.presence, &z)),
            sigmoid(linear(&self.severity, &z)),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GaussianClass {
    log_prior: f64,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl GaussianClass {
    fn fit(rows: &[&Vec<f64>], total: usize, d: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let var = (0..d)
            .map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n + 1e-3)
            .collect();
        Self {
            log_prior: ((rows.len() as f64 + 1.0) / (total as f64 + 2.0)).ln(),
            mean,
            var,
        }
    }

    fn log_likelihood(&self, x: &[f64]) -> f64 {
        self.log_prior
            + x.iter()
                .zip(&self.mean)
                .zip(&self.var)
                .map(|((v, m), s)| -0.5 * ((v - m).powi(2) / s + s.ln()))
                .sum::<f64>()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BinaryBayes {
    positive: GaussianClass,
    negative: GaussianClass,
}

impl BinaryBayes {
    fn fit(x: &[&Vec<f64>], y: &[bool], d: usize) -> Self {
        let pos: Vec<&Vec<f64>> = x
            .iter()
            .zip(y)
            .filter(|(_, l)| **l)
            .map(|(r, _)| *r)
            .collect();
        let neg: Vec<&Vec<f64>> = x
            .iter()
            .zip(y)
            .filter(|(_, l)| !**l)
            .map(|(r, _)| *r)
            .collect();
        Self {
            positive: GaussianClass::fit(&pos, x.len(), d),
            negative: GaussianClass::fit(&neg, x.len(), d),
        }
    }

    fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.positive.log_likelihood(x) - self.negative.log_likelihood(x))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BayesModel {
    presence: BinaryBayes,
    severity: BinaryBayes,
}

impl BayesModel {
    fn fit(data: &TrainingData) -> Self {
        let d = data.x[0].len();
        let all: Vec<&Vec<f64>> = data.x.iter().collect();
        let positives: Vec<usize> = (0..data.x.len()).filter(|&i| data.presence[i]).collect();
        let px: Vec<&Vec<f64>> = positives.iter().map(|&i| &data.x[i]).collect();
        let py: Vec<bool> = positives.iter().map(|&i| data.severe[i]).collect();
        Self {
            presence: BinaryBayes::fit(&all, &data.presence, d),
            severity: BinaryBayes::fit(&px, &py, d),
        }
    }

    fn predict(&self, x: &[f64]) -> (f64, f64) {
        (self.presence.probability(x), self.severity.probability(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_parse_and_print() {
        for s in [
            "constant:0.5",
            "noise",
            "logistic",
            "logistic-l2",
            "naive-bayes",
            "oracle:0.35,0.5,1.5",
            "fail:boom",
            "sleep:2",
            "scratch:1024",
            "out-of-range",
            "adversarial",
            "fail-above:300",
            "leaky",
            "crash",
        ] {
            assert_eq!(AdapterSpec::parse(s).unwrap().to_string(), s);
        }
        assert_eq!(
            AdapterSpec::parse("constant").unwrap(),
            AdapterSpec::Constant(0.5)
        );
        for bad in [
            "",
            "gpt",
            "noise:1",
            "sleep",
            "sleep:x",
            "oracle:1,2",
            "constant:nan",
        ] {
            assert!(AdapterSpec::parse(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn logistic_fit_separates_a_simple_rule() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 - 100.0) / 50.0]).collect();
        let y: Vec<bool> = (0..200).map(|i| i >= 100).collect();
        let w = fit_logistic(&x, &y, 0.0);
        assert!(w[0] > 1.0);
        assert!(sigmoid(linear(&w, &[1.0])) > 0.8);
        assert!(sigmoid(linear(&w, &[-1.0])) < 0.2);
    }
}
