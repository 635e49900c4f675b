use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::domain::{JobId, JobMode, JobSpec, JobStatus, PredictionSet, SplitName, SubjectId};

use super::adapters::{run_adapter, AdapterSpec};
use super::artifact::ModelArtifact;
use super::protocol::{Shim, ShimError, Transport};
use super::server::{Ending, ShimServer};
use super::{AuditEntry, DataSource, JobOutcome, SandboxError};

/// Adapter specs with this prefix name an external program that speaks the
/// shim protocol on stdin/stdout.
const EXEC_PREFIX: &str = "exec:";

/// How adapters are executed.
#[derive(Debug, Clone)]
pub enum Backend {
    /// Each job phase is a child process: `<program> adapter-host <spec>`.
    Process { program: PathBuf },
    /// Adapters run on a thread of this process. Faster, no isolation.
    InProcess,
}

enum Msg {
    Request(String),
    Stderr(String),
    Closed,
}

enum Sink {
    Child(Child, Option<ChildStdin>),
    Thread(Option<Sender<String>>),
}

impl Sink {
    fn respond(&mut self, line: &str) {
        match self {
            Sink::Child(_, stdin) => {
                if let Some(pipe) = stdin {
                    if writeln!(pipe, "{line}")
                        .and_then(|()| pipe.flush())
                        .is_err()
                    {
                        *stdin = None;
                    }
                }
            }
            Sink::Thread(tx) => {
                if let Some(sender) = tx {
                    if sender.send(line.to_owned()).is_err() {
                        *tx = None;
                    }
                }
            }
        }
    }

    fn kill(&mut self) {
        match self {
            Sink::Child(child, stdin) => {
                stdin.take();
                let _ = child.kill();
                let _ = child.wait();
            }
            Sink::Thread(tx) => {
                tx.take();
            }
        }
    }

    /// Closes the request channel and gives the adapter a moment to exit.
    fn finish(&mut self, grace: Duration) -> Option<String> {
        match self {
            Sink::Child(child, stdin) => {
                stdin.take();
                let until = Instant::now() + grace;
                loop {
                    match child.try_wait() {
                        Ok(Some(status)) if status.success() => return None,
                        Ok(Some(status)) => {
                            return Some(format!("adapter process exited with {status}"))
                        }
                        Ok(None) if Instant::now() < until => {
                            std::thread::sleep(Duration::from_millis(5))
                        }
                        _ => {
                            let _ = child.kill();
                            let _ = child.wait();
                            return Some("adapter process did not exit and was killed".into());
                        }
                    }
                }
            }
            Sink::Thread(tx) => {
                tx.take();
                None
            }
        }
    }
}

struct ChannelTransport {
    requests: Sender<Msg>,
    responses: Receiver<String>,
}

impl Transport for ChannelTransport {
    fn call(&mut self, line: &str) -> Result<String, ShimError> {
        self.requests
            .send(Msg::Request(line.to_owned()))
            .map_err(|_| ShimError::Closed)?;
        self.responses.recv().map_err(|_| ShimError::Closed)
    }
}

struct PhaseResult {
    server: ShimServer,
    status: JobStatus,
    error: Option<String>,
    scratch_peak: u64,
}

fn scratch_usage(dir: &Path) -> u64 {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(Result::ok)
        .filter_map(|e| e.metadata().ok())
        .filter(|m| m.is_file())
        .map(|m| m.len())
        .sum()
}

/// Executes jobs. Safe to share between threads; each job gets its own
/// scratch directory and shim.
pub struct Runner {
    data: Arc<DataSource>,
    backend: Backend,
    scratch_root: PathBuf,
    poll: Duration,
    audits: Mutex<HashMap<JobId, Vec<AuditEntry>>>,
}

impl Runner {
    pub fn new(data: Arc<DataSource>, backend: Backend, scratch_root: impl Into<PathBuf>) -> Self {
        let scratch_root = scratch_root.into();
        Self {
            data,
            backend,
            // adapters run with their scratch directory as working directory
            scratch_root: std::path::absolute(&scratch_root).unwrap_or(scratch_root),
            poll: Duration::from_millis(20),
            audits: Mutex::new(HashMap::new()),
        }
    }

    pub fn data(&self) -> &Arc<DataSource> {
        &self.data
    }

    /// Every shim access of a finished job, served or denied.
    pub fn access_audit(&self, job_id: &JobId) -> Vec<AuditEntry> {
        self.audits
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(job_id)
            .cloned()
            .unwrap_or_default()
    }

    pub fn run_training(&self, spec: &JobSpec, adapter: &str) -> Result<JobOutcome, SandboxError> {
        if spec.mode != JobMode::Train {
            return Err(SandboxError::Spec(format!(
                "{} is not a training job",
                spec.job_id
            )));
        }
        self.run_job(spec, adapter, None)
    }

    /// Scores `split` with an existing model.
    pub fn run_inference(
        &self,
        spec: &JobSpec,
        model: &ModelArtifact,
        adapter: &str,
    ) -> Result<PredictionSet, SandboxError> {
        let mut spec = spec.clone();
        spec.mode = JobMode::Infer;
        spec.prepare_split = None;
        let outcome = self.run_job(&spec, adapter, Some(model))?;
        match outcome.predictions {
            Some(set) if outcome.status == JobStatus::Completed => Ok(set),
            _ => Err(SandboxError::InvalidPredictions(
                outcome
                    .error
                    .unwrap_or_else(|| format!("job ended {:?}", outcome.status)),
            )),
        }
    }

    fn subset(&self, split: SplitName) -> Result<Vec<SubjectId>, SandboxError> {
        let ids = self.data.split.subset(split);
        if ids.is_empty() {
            return Err(SandboxError::Spec(format!(
                "split {split} is empty or not defined"
            )));
        }
        if let Some(unknown) = ids.iter().find(|id| !self.data.records.contains_key(*id)) {
            return Err(SandboxError::Spec(format!(
                "split {split} names unknown subject {unknown}"
            )));
        }
        Ok(ids.to_vec())
    }

    /// Runs a job to a terminal status. Train jobs fit on `split_name`.
    /// Infer jobs score `split_name` with `model`, or with a model first
    /// fitted on `prepare_split`; both phases share one wall-clock budget.
    pub fn run_job(
        &self,
        spec: &JobSpec,
        adapter: &str,
        model: Option<&ModelArtifact>,
    ) -> Result<JobOutcome, SandboxError> {
        if !adapter.starts_with(EXEC_PREFIX) {
            AdapterSpec::parse(adapter).map_err(SandboxError::Spec)?;
        } else if matches!(self.backend, Backend::InProcess) {
            return Err(SandboxError::Spec(
                "external adapters need the process backend".into(),
            ));
        }
        spec.budget
            .validate()
            .map_err(|e| SandboxError::Spec(e.to_string()))?;
        let mut phases = Vec::new();
        match (spec.mode, spec.prepare_split, model) {
            (JobMode::Train, _, _) => phases.push((JobMode::Train, spec.split_name)),
            (JobMode::Infer, Some(prepare), _) => {
                phases.push((JobMode::Train, prepare));
                phases.push((JobMode::Infer, spec.split_name));
            }
            (JobMode::Infer, None, Some(m)) => {
                if !m.verify() {
                    return Err(SandboxError::Spec(format!(
                        "model {} failed verification",
                        m.model_ref()
                    )));
                }
                phases.push((JobMode::Infer, spec.split_name));
            }
            (JobMode::Infer, None, None) => {
                return Err(SandboxError::Spec(format!(
                    "{} is an inference job without a model",
                    spec.job_id
                )));
            }
        }
        let subsets = phases
            .iter()
            .map(|(_, split)| self.subset(*split))
            .collect::<Result<Vec<_>, _>>()?;

        let scratch = self.scratch_root.join(spec.job_id.as_str());
        std::fs::create_dir_all(&scratch)?;
        let started = Instant::now();
        let deadline = started + spec.budget.wall_clock_limit;

        let mut outcome = JobOutcome {
            job_id: spec.job_id.clone(),
            status: JobStatus::Completed,
            model: None,
            predictions: None,
            raw_log: String::new(),
            wall_clock_used: 0.0,
            scratch_used: 0,
            audit: Vec::new(),
            error: None,
        };
        let mut model_bytes = model.map(|m| m.bytes.clone());
        for ((mode, _), subset) in phases.into_iter().zip(subsets) {
            let server = ShimServer::new(
                Arc::clone(&self.data),
                mode,
                subset,
                spec.seed,
                spec.budget.worker_count,
                &scratch.to_string_lossy(),
                if mode == JobMode::Infer {
                    model_bytes.clone()
                } else {
                    None
                },
            );
            let mut phase = self.run_phase(server, adapter, &scratch, spec, deadline)?;
            outcome.scratch_used = outcome.scratch_used.max(phase.scratch_peak);
            if phase.status == JobStatus::Completed {
                match mode {
                    JobMode::Train => match phase.server.model_out.take() {
                        Some(bytes) => {
                            let artifact =
                                ModelArtifact::new(adapter, spec.seed, spec.issued_at, bytes);
                            model_bytes = Some(artifact.bytes.clone());
                            outcome.model = Some(artifact);
                        }
                        None => fail(
                            &mut phase,
                            "training finished without storing a model".into(),
                        ),
                    },
                    JobMode::Infer => match phase.server.prediction_set(&spec.submission_id) {
                        Ok(set) => outcome.predictions = Some(set),
                        Err(message) => fail(&mut phase, message),
                    },
                }
            }
            outcome.raw_log.push_str(&phase.server.log);
            outcome.audit.append(&mut phase.server.audit);
            outcome.status = phase.status;
            outcome.error = phase.error;
            if outcome.status != JobStatus::Completed {
                break;
            }
        }
        outcome.wall_clock_used = started.elapsed().as_secs_f64();
        let _ = std::fs::remove_dir_all(&scratch);
        self.audits
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(spec.job_id.clone(), outcome.audit.clone());
        Ok(outcome)
    }

    fn spawn(&self, adapter: &str, scratch: &Path, tx: Sender<Msg>) -> Result<Sink, SandboxError> {
        match &self.backend {
            Backend::Process { program } => {
                let mut command = match adapter.strip_prefix(EXEC_PREFIX) {
                    Some(line) => {
                        let mut parts = line.split_whitespace();
                        let exe = parts
                            .next()
                            .ok_or_else(|| SandboxError::Spec("empty exec adapter".into()))?;
                        let mut c = Command::new(exe);
                        c.args(parts);
                        c
                    }
                    None => {
                        let mut c = Command::new(program);
                        c.arg("adapter-host").arg(adapter);
                        c
                    }
                };
                // The child starts in its scratch directory with only PATH
                // inherited, so it learns nothing about the store location.
                command.env_clear().current_dir(scratch);
                if let Some(path) = std::env::var_os("PATH") {
                    command.env("PATH", path);
                }
                let mut child = command
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::piped())
                    .spawn()
                    .map_err(|e| SandboxError::Spec(format!("cannot start adapter: {e}")))?;
                let stdout = child.stdout.take().expect("piped stdout");
                let stderr = child.stderr.take().expect("piped stderr");
                let out_tx = tx.clone();
                std::thread::spawn(move || {
                    for line in BufReader::new(stdout).lines() {
                        let Ok(line) = line else { break };
                        if out_tx.send(Msg::Request(line)).is_err() {
                            return;
                        }
                    }
                    let _ = out_tx.send(Msg::Closed);
                });
                std::thread::spawn(move || {
                    for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                        if tx.send(Msg::Stderr(line)).is_err() {
                            return;
                        }
                    }
                });
                let stdin = child.stdin.take();
                Ok(Sink::Child(child, stdin))
            }
            Backend::InProcess => {
                let spec = AdapterSpec::parse(adapter).map_err(SandboxError::Spec)?;
                let (resp_tx, resp_rx) = mpsc::channel();
                std::thread::spawn(move || {
                    let mut transport = ChannelTransport {
                        requests: tx.clone(),
                        responses: resp_rx,
                    };
                    let result = catch_unwind(AssertUnwindSafe(|| {
                        let mut shim = Shim::new(&mut transport);
                        run_adapter(&spec, &mut shim)
                    }));
                    let note = match result {
                        Ok(Ok(())) => None,
                        Ok(Err(e)) => Some(e.to_string()),
                        Err(panic) => Some(format!("adapter panicked: {}", panic_message(&panic))),
                    };
                    if let Some(note) = note {
                        let _ = tx.send(Msg::Stderr(note));
                    }
                    let _ = tx.send(Msg::Closed);
                });
                Ok(Sink::Thread(Some(resp_tx)))
            }
        }
    }

    fn run_phase(
        &self,
        mut server: ShimServer,
        adapter: &str,
        scratch: &Path,
        spec: &JobSpec,
        deadline: Instant,
    ) -> Result<PhaseResult, SandboxError> {
        let (tx, rx) = mpsc::channel();
        let mut sink = self.spawn(adapter, scratch, tx)?;
        let quota = spec.budget.scratch_quota;
        let mut peak = 0u64;
        let mut last_scan = Instant::now();
        let mut closed = false;
        let breach = loop {
            let now = Instant::now();
            if now >= deadline {
                break Some(JobStatus::TimedOut);
            }
            if now.duration_since(last_scan) >= self.poll {
                last_scan = now;
                peak = peak.max(scratch_usage(scratch));
                if peak > quota {
                    break Some(JobStatus::QuotaExceeded);
                }
            }
            match rx.recv_timeout(self.poll.min(deadline - now)) {
                Ok(Msg::Request(line)) => {
                    let response = server.handle(&line);
                    sink.respond(&response.to_string());
                    if server.ending.is_some() {
                        break None;
                    }
                }
                Ok(Msg::Stderr(line)) => server.note(&line),
                Ok(Msg::Closed) | Err(RecvTimeoutError::Disconnected) => {
                    closed = true;
                    break None;
                }
                Err(RecvTimeoutError::Timeout) => {}
            }
        };

        let mut result = PhaseResult {
            status: JobStatus::Completed,
            error: None,
            scratch_peak: 0,
            server,
        };
        match breach {
            Some(status) => {
                sink.kill();
                drain(&rx, &mut result.server);
                let message = match status {
                    JobStatus::TimedOut => format!(
                        "wall-clock limit of {}s exceeded; job killed",
                        spec.budget.wall_clock_limit.as_secs_f64()
                    ),
                    _ => format!(
                        "scratch usage {peak} bytes exceeded quota of {quota} bytes; job killed"
                    ),
                };
                result.server.note(&format!("runner: {message}"));
                result.status = status;
                result.error = Some(message);
            }
            None => {
                let exit = if closed {
                    None
                } else {
                    sink.finish(Duration::from_secs(2))
                };
                drain(&rx, &mut result.server);
                peak = peak.max(scratch_usage(scratch));
                match result.server.ending.take() {
                    _ if peak > quota => {
                        let message =
                            format!("scratch usage {peak} bytes exceeded quota of {quota} bytes");
                        result.server.note(&format!("runner: {message}"));
                        result.status = JobStatus::QuotaExceeded;
                        result.error = Some(message);
                    }
                    Some(Ending::Done) => {
                        if let Some(exit) = exit {
                            result.server.note(&format!("runner: {exit}"));
                        }
                    }
                    Some(Ending::Failed(message)) => {
                        result.status = JobStatus::Failed;
                        result.error = Some(message);
                    }
                    None => {
                        let message = "adapter exited without DONE".to_owned();
                        result.server.note(&format!("runner: {message}"));
                        result.status = JobStatus::Failed;
                        result.error = Some(message);
                    }
                }
            }
        }
        result.scratch_peak = peak;
        Ok(result)
    }
}

fn fail(phase: &mut PhaseResult, message: String) {
    phase.server.note(&format!("runner: {message}"));
    phase.status = JobStatus::Failed;
    phase.error = Some(message);
}

/// Collects stderr that arrived before the adapter went away.
fn drain(rx: &Receiver<Msg>, server: &mut ShimServer) {
    let until = Instant::now() + Duration::from_millis(200);
    while let Ok(msg) = rx.recv_timeout(until.saturating_duration_since(Instant::now())) {
        match msg {
            Msg::Stderr(line) => server.note(&line),
            Msg::Closed => break,
            Msg::Request(_) => {}
        }
    }
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    panic
        .downcast_ref::<&str>()
        .map(|s| (*s).to_owned())
        .or_else(|| panic.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}
