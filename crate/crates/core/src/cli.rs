//! `t3ctl`: operator tooling over the same operations the service exposes.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::cohort::{
    generate_cohort, read_split_manifest, sample_splits, validate_split, write_split_manifest,
    CohortConfig, SplitConfig,
};
use crate::domain::io::{load_cohort, read_predictions, save_cohort};
use crate::domain::{
    ParticipantId, PhaseTarget, SubmissionId, SubmissionKind, Team, TeamId, Timestamp,
};
use crate::metrics::{
    auc, bootstrap_ci, eligible_samples, roc_curve, DisplayFilter, Endpoint, BOOTSTRAP_ITERATIONS,
};
use crate::phase::{Board, ChallengeConfig, Round};
use crate::platform::{
    roc_csv, Platform, PlatformError, PlatformOptions, SubmitOutcome, SubmitRequest, Viewer,
};
use crate::review::ReviewDecision;
use crate::sandbox::{run_host, Backend};
use crate::service::{self, AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(
    name = "t3ctl",
    version,
    about = "Run a train-on-sequestered-data challenge"
)]
struct Cli {
    /// Challenge store directory.
    #[arg(long, env = "T3_STORE", global = true)]
    store: Option<PathBuf>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Clock override, seconds since the epoch.
    #[arg(long, global = true)]
    now: Option<Timestamp>,
    /// How adapters are executed.
    #[arg(
        long,
        value_enum,
        env = "T3_BACKEND",
        default_value = "process",
        global = true
    )]
    backend: BackendArg,
    /// Concurrent jobs when running a round.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Act as `organizer:<id>` or `team:<id>`. Defaults to the first organizer.
    #[arg(long = "as", global = true)]
    viewer: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Process,
    InProcess,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic cohorts.
    #[command(subcommand)]
    Cohort(CohortCmd),
    /// Dataset splits.
    #[command(subcommand)]
    Split(SplitCmd),
    /// Create a challenge store from a cohort and a split manifest.
    Init {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Challenge settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Redaction rules, one `action pattern` per line.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Current phase, open rounds and team states.
    Status,
    #[command(subcommand)]
    Team(TeamCmd),
    /// Submit an adapter on behalf of a team.
    Submit {
        #[arg(long)]
        team: String,
        /// rolling_a1, final_a2, ft_round1, ft_feedback or ft_round2
        #[arg(long)]
        target: String,
        /// Adapter specification, e.g. `logistic`.
        #[arg(long)]
        payload: String,
        /// inference_algorithm or training_codebase
        #[arg(long)]
        kind: Option<String>,
        /// Round 2: confirm that the round 1 submission is renounced.
        #[arg(long)]
        confirm_renounce: bool,
    },
    #[command(subcommand)]
    Round(RoundCmd),
    #[command(subcommand)]
    Eval(EvalCmd),
    #[command(subcommand)]
    Leaderboard(LeaderboardCmd),
    #[command(subcommand)]
    Review(ReviewCmd),
    #[command(subcommand)]
    Report(ReportCmd),
    /// Serve the HTTP API until interrupted.
    Serve {
        /// Service settings (TOML): bind, auto_run, tokens.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bind: Option<std::net::SocketAddr>,
    },
}

#[derive(Debug, Subcommand)]
enum CohortCmd {
    /// Generate a synthetic cohort (labels CSV plus a features CSV beside it).
    Gen {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator settings (TOML); `--n` and `--seed` override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum SplitCmd {
    /// Sample the challenge subsets from a cohort.
    Sample {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ta: usize,
        #[arg(long)]
        a1: usize,
        #[arg(long)]
        a2: usize,
        #[arg(long)]
        tb: usize,
        #[arg(long)]
        stratify: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a manifest's disjointness and containment rules.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        /// Also check that every id exists in this cohort.
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum TeamCmd {
    Add {
        #[arg(long)]
        id: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long = "member")]
        members: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
enum RoundCmd {
    /// Open round1, feedback or round2.
    Open { round: String },
    /// Close round1, feedback or round2; or end a phase with `qualification` or `final`.
    Close {
        round: String,
        /// Qualification: teams that decline the finalist invitation.
        #[arg(long = "decline")]
        declined: Vec<String>,
    },
    /// Run every queued job.
    Run,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Subset {
    /// Severity over RT-PCR-positive subjects.
    RtpcrPositive,
    /// Presence over every subject.
    All,
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Score a prediction file against a label file.
    Run {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value = "rtpcr-positive")]
        subset: Subset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum LeaderboardCmd {
    /// Show the a1, a2 or b board.
    Show { board: String },
}

#[derive(Debug, Subcommand)]
enum ReviewCmd {
    /// Pending and decided review items.
    List,
    Decide {
        item: String,
        /// release or withhold
        decision: String,
        /// File whose text replaces the redacted log on release.
        #[arg(long)]
        edits: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum ReportCmd {
    /// Write leaderboards, the final report, ROC curves and rank matrices.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Domain(String),
}

impl From<PlatformError> for CliError {
    fn from(e: PlatformError) -> Self {
        CliError::Domain(e.to_string())
    }
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> Result<T, CliError> {
    serde_json::from_value(Value::String(s.to_owned()))
        .map_err(|_| CliError::Usage(format!("unknown {what} {s:?}")))
}

fn to_json(v: impl Serialize) -> Value {
    serde_json::to_value(v).expect("serializable output")
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| domain(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| domain(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(domain)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| domain(format!("{}: {e}", path.display())))
}

struct Ctx {
    cli: Cli,
}

impl Ctx {
    fn now(&self) -> Timestamp {
        self.cli.now.unwrap_or_else(|| (service::system_clock())())
    }

    fn store(&self) -> Result<&Path, CliError> {
        self.cli
            .store
            .as_deref()
            .ok_or_else(|| CliError::Usage("no store: pass --store or set T3_STORE".into()))
    }

    fn options(&self) -> Result<PlatformOptions, CliError> {
        let backend = match self.cli.backend {
            BackendArg::InProcess => Backend::InProcess,
            BackendArg::Process => Backend::Process {
                program: std::env::current_exe().map_err(domain)?,
            },
        };
        let mut options = PlatformOptions {
            backend,
            ..PlatformOptions::default()
        };
        if let Some(n) = self.cli.parallelism {
            options.parallelism = n;
        }
        Ok(options)
    }

    fn platform(&self) -> Result<Platform, CliError> {
        Ok(Platform::open(self.store()?, self.options()?)?)
    }

    fn viewer(&self, platform: &Platform) -> Result<Viewer, CliError> {
        match self.cli.viewer.as_deref() {
            None => platform
                .handle()
                .read(|c| c.config().organizers.iter().next().cloned())
                .map(Viewer::Organizer)
                .ok_or_else(|| domain("challenge has no organizers")),
            Some("anonymous") => Ok(Viewer::Anonymous),
            Some(role) => match role.split_once(':') {
                Some(("organizer", id)) => Ok(Viewer::Organizer(id.to_owned())),
                Some(("team", id)) => Ok(Viewer::Team(TeamId::new(id))),
                _ => Err(CliError::Usage(format!(
                    "--as takes organizer:<id>, team:<id> or anonymous, got {role:?}"
                ))),
            },
        }
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn cli_run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    // adapter children skip argument parsing entirely
    if argv.get(1).is_some_and(|a| a == "adapter-host") {
        return match argv.get(2).and_then(|s| s.to_str()) {
            Some(spec) => run_host(spec),
            None => {
                let _ = writeln!(err, "usage: t3ctl adapter-host <spec>");
                2
            }
        };
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let as_json = cli.json;
    let ctx = Ctx { cli };
    match dispatch(&ctx) {
        Ok(value) => {
            let text = if as_json {
                serde_json::to_string_pretty(&value).expect("json output")
            } else {
                render_text(&value)
            };
            let _ = writeln!(out, "{text}");
            0
        }
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(CliError::Domain(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
    }
}

fn dispatch(ctx: &Ctx) -> Result<Value, CliError> {
    match &ctx.cli.command {
        Command::Cohort(CohortCmd::Gen {
            n,
            seed,
            config,
            out,
        }) => {
            let mut cfg: CohortConfig = match config {
                Some(path) => read_toml(path)?,
                None => CohortConfig::default(),
            };
            cfg.n_subjects = *n;
            cfg.seed = *seed;
            let cohort = generate_cohort(&cfg).map_err(domain)?;
            save_cohort(out, &cohort).map_err(domain)?;
            let positives = cohort.iter().filter(|r| r.rtpcr_positive).count();
            let severe = cohort.iter().filter(|r| r.severe).count();
            Ok(
                json!({"path": out, "n_subjects": cohort.len(), "rtpcr_positive": positives, "severe": severe, "seed": seed}),
            )
        }
        Command::Split(SplitCmd::Sample {
            cohort,
            seed,
            ta,
            a1,
            a2,
            tb,
            stratify,
            out,
        }) => {
            let records = load_cohort(cohort).map_err(domain)?;
            let config = SplitConfig {
                size_training_a: *ta,
                size_test_a1: *a1,
                size_test_a2: *a2,
                size_test_b: *tb,
                seed: *seed,
                stratify: *stratify,
            };
            let split = sample_splits(&records, &config).map_err(domain)?;
            let file =
                fs::File::create(out).map_err(|e| domain(format!("{}: {e}", out.display())))?;
            write_split_manifest(&split, file).map_err(domain)?;
            Ok(json!({"path": out, "seed": seed, "sizes": split.sizes()}))
        }
        Command::Split(SplitCmd::Validate { manifest, cohort }) => {
            let file = fs::File::open(manifest)
                .map_err(|e| domain(format!("{}: {e}", manifest.display())))?;
            let split = read_split_manifest(file).map_err(domain)?;
            let mut violations = to_json(validate_split(&split))
                .as_array()
                .cloned()
                .unwrap_or_default();
            if let Some(path) = cohort {
                let known: BTreeSet<_> = load_cohort(path)
                    .map_err(domain)?
                    .into_iter()
                    .map(|r| r.subject_id)
                    .collect();
                for id in split.universe.iter().filter(|id| !known.contains(*id)) {
                    violations.push(json!({"kind": "not_in_cohort", "subject_id": id}));
                }
            }
            if violations.is_empty() {
                Ok(json!({"valid": true, "sizes": split.sizes()}))
            } else {
                Err(domain(format!(
                    "{} violations, first: {}",
                    violations.len(),
                    violations[0]
                )))
            }
        }
        Command::Init {
            cohort,
            manifest,
            config,
            policy,
            seed,
        } => {
            let store = ctx.store()?;
            if store.join("events.log").exists() {
                return Err(domain(format!(
                    "{} already holds a challenge",
                    store.display()
                )));
            }
            let mut cfg: ChallengeConfig = match config {
                Some(path) => read_toml(path)?,
                None => ChallengeConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = *seed;
            }
            let records = load_cohort(cohort).map_err(domain)?;
            let file = fs::File::open(manifest)
                .map_err(|e| domain(format!("{}: {e}", manifest.display())))?;
            let split = read_split_manifest(file).map_err(domain)?;
            if let Some(v) = validate_split(&split).first() {
                return Err(domain(format!("invalid split: {}", to_json(v))));
            }
            if let Some(path) = policy {
                let text = fs::read_to_string(path).map_err(domain)?;
                crate::review::RedactionPolicy::parse(&text).map_err(domain)?;
                crate::platform::Store::open(store)
                    .and_then(|s| s.save_policy_text(&text))
                    .map_err(domain)?;
            }
            let platform = Platform::create(store, cfg, records, split, ctx.options()?, ctx.now())?;
            Ok(json!({"store": store, "status": platform.phase_status()}))
        }
        Command::Status => Ok(to_json(ctx.platform()?.phase_status())),
        Command::Team(TeamCmd::Add { id, name, members }) => {
            let platform = ctx.platform()?;
            let team = Team {
                team_id: TeamId::new(id.as_str()),
                member_ids: members
                    .iter()
                    .map(|m| ParticipantId::new(m.as_str()))
                    .collect(),
                display_name: name.clone().unwrap_or_else(|| id.clone()),
            };
            platform.register_team(team.clone(), ctx.now())?;
            Ok(to_json(team))
        }
        Command::Submit {
            team,
            target,
            payload,
            kind,
            confirm_renounce,
        } => {
            let platform = ctx.platform()?;
            let request = SubmitRequest {
                team_id: TeamId::new(team.as_str()),
                target: parse_enum::<PhaseTarget>("target", target)?,
                payload: payload.clone(),
                kind: kind
                    .as_deref()
                    .map(|k| parse_enum::<SubmissionKind>("kind", k))
                    .transpose()?,
                confirm_renounce: *confirm_renounce,
            };
            let outcome = platform.submit(&request, ctx.now())?;
            match outcome {
                SubmitOutcome::Rejected { next_allowed_at } => Err(domain(format!(
                    "countdown running: next submission allowed at {next_allowed_at}"
                ))),
                accepted => Ok(to_json(accepted)),
            }
        }
        Command::Round(cmd) => round(ctx, cmd),
        Command::Eval(EvalCmd::Run {
            predictions,
            labels,
            subset,
            seed,
        }) => {
            let records = load_cohort(labels).map_err(domain)?;
            let name = predictions
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("predictions");
            let file = fs::File::open(predictions)
                .map_err(|e| domain(format!("{}: {e}", predictions.display())))?;
            let preds = read_predictions(file, SubmissionId::new(name)).map_err(domain)?;
            let (endpoint, subset_name, endpoint_name) = match subset {
                Subset::RtpcrPositive => (Endpoint::Severity, "rtpcr-positive", "severity"),
                Subset::All => (Endpoint::Presence, "all", "presence"),
            };
            let samples = eligible_samples(&preds, &records, endpoint).map_err(domain)?;
            let (lo, hi) = bootstrap_ci(&samples, BOOTSTRAP_ITERATIONS, *seed).map_err(domain)?;
            Ok(json!({
                "endpoint": endpoint_name,
                "subset": subset_name,
                "auc": auc(&samples).map_err(domain)?,
                "ci": [lo, hi],
                "n_cases": samples.len(),
                "n_positive": samples.iter().filter(|s| s.label).count(),
                "bootstrap_iterations": BOOTSTRAP_ITERATIONS,
                "seed": seed,
                "roc": roc_curve(&samples).map_err(domain)?,
            }))
        }
        Command::Leaderboard(LeaderboardCmd::Show { board }) => {
            let platform = ctx.platform()?;
            let b = Board::parse(board)
                .ok_or_else(|| CliError::Usage(format!("unknown board {board:?}")))?;
            Ok(to_json(platform.leaderboard(b, &ctx.viewer(&platform)?)?))
        }
        Command::Review(ReviewCmd::List) => {
            let platform = ctx.platform()?;
            Ok(to_json(platform.review_queue(&ctx.viewer(&platform)?)?))
        }
        Command::Review(ReviewCmd::Decide {
            item,
            decision,
            edits,
        }) => {
            let platform = ctx.platform()?;
            let decision = parse_enum::<ReviewDecision>("decision", decision)?;
            let edits = edits
                .as_ref()
                .map(fs::read_to_string)
                .transpose()
                .map_err(domain)?;
            Ok(to_json(platform.decide_review(
                item,
                decision,
                &ctx.viewer(&platform)?,
                edits,
                ctx.now(),
            )?))
        }
        Command::Report(ReportCmd::Export { out }) => export(ctx, out),
        Command::Serve { config, bind } => serve(ctx, config.as_deref(), *bind),
    }
}

fn round(ctx: &Ctx, cmd: &RoundCmd) -> Result<Value, CliError> {
    let platform = ctx.platform()?;
    let now = ctx.now();
    match cmd {
        RoundCmd::Run => {
            let clock = || ctx.now();
            Ok(to_json(platform.run_pending(&clock)?))
        }
        RoundCmd::Open { round } => {
            let r = Round::parse(round)
                .ok_or_else(|| CliError::Usage(format!("unknown round {round:?}")))?;
            platform.open_round(r, now)?;
            Ok(json!({"round": r, "open": true}))
        }
        RoundCmd::Close { round, declined } => match round.as_str() {
            "qualification" => {
                let finalists = platform
                    .close_qualification(|t| !declined.iter().any(|d| d == t.as_str()), now)?;
                Ok(json!({"finalists": finalists}))
            }
            "final" => {
                let plan = platform.close_final(now)?;
                Ok(json!({"test_b_jobs": plan.jobs.len(), "excluded": plan.excluded}))
            }
            other => {
                let r = Round::parse(other)
                    .ok_or_else(|| CliError::Usage(format!("unknown round {other:?}")))?;
                platform.close_round(r, now)?;
                Ok(json!({"round": r, "open": false}))
            }
        },
    }
}

/// Writes everything the viewer may see into `out`.
fn export(ctx: &Ctx, out: &Path) -> Result<Value, CliError> {
    let platform = ctx.platform()?;
    let viewer = ctx.viewer(&platform)?;
    fs::create_dir_all(out).map_err(domain)?;
    let mut written = Vec::new();
    for (name, board) in [("a1", Board::A1), ("a2", Board::A2), ("b", Board::B)] {
        let Ok(entries) = platform.leaderboard(board, &viewer) else {
            continue;
        };
        let path = out.join(format!("leaderboard_{name}.json"));
        write_json(&path, &entries)?;
        written.push(path);
        for entry in &entries {
            for report in platform.eval_reports(&entry.submission_id, &viewer)? {
                if report.board != Some(board) {
                    continue;
                }
                let path = out.join(format!("roc_{name}_{}.csv", entry.team_id));
                fs::write(&path, roc_csv(&report)).map_err(domain)?;
                written.push(path);
            }
        }
    }
    if let Ok(report) = platform.final_report(&viewer) {
        let path = out.join("final_report.json");
        write_json(&path, &report)?;
        written.push(path);
    }
    for (name, filter) in [
        ("severe", DisplayFilter::Severe),
        ("non_severe", DisplayFilter::NonSevere),
    ] {
        if let Ok(matrix) = platform.rank_matrix(filter, &viewer) {
            let path = out.join(format!("rank_matrix_{name}.json"));
            write_json(&path, &matrix)?;
            written.push(path);
        }
    }
    Ok(json!({"written": written}))
}

fn serve(
    ctx: &Ctx,
    config: Option<&Path>,
    bind: Option<std::net::SocketAddr>,
) -> Result<Value, CliError> {
    let mut cfg = match config {
        Some(path) => ServiceConfig::load(path).map_err(domain)?,
        None => ServiceConfig::default(),
    };
    if let Some(bind) = bind {
        cfg.bind = bind;
    }
    let platform = Arc::new(ctx.platform()?);
    let clock = match ctx.cli.now {
        Some(t) => Arc::new(move || t) as service::Clock,
        None => service::system_clock(),
    };
    let state = AppState::new(platform, &cfg, clock).map_err(domain)?;
    let runtime = tokio::runtime::Runtime::new().map_err(domain)?;
    runtime.block_on(async {
        let handle = service::serve(state, cfg.bind).await.map_err(domain)?;
        eprintln!("listening on http://{}", handle.local_addr);
        tokio::signal::ctrl_c().await.map_err(domain)?;
        let addr = handle.local_addr;
        handle.shutdown().await.map_err(domain)?;
        Ok(json!({"stopped": addr}))
    })
}

/// Objects print as `key: value` lines, arrays of objects as tab-separated
/// tables.
fn render_text(value: &Value) -> String {
    fn scalar(v: &Value) -> String {
        match v {
            Value::String(s) => s.clone(),
            Value::Null => "-".into(),
            other => other.to_string(),
        }
    }
    match value {
        Value::Array(rows) if rows.iter().all(Value::is_object) && !rows.is_empty() => {
            let mut columns: Vec<&String> = Vec::new();
            for row in rows {
                for key in row.as_object().expect("object row").keys() {
                    if !columns.contains(&key) {
                        columns.push(key);
                    }
                }
            }
            let mut lines = vec![columns
                .iter()
                .map(|c| c.as_str())
                .collect::<Vec<_>>()
                .join("\t")];
            for row in rows {
                lines.push(
                    columns
                        .iter()
                        .map(|c| scalar(&row[c.as_str()]))
                        .collect::<Vec<_>>()
                        .join("\t"),
                );
            }
            lines.join("\n")
        }
        Value::Array(rows) if rows.is_empty() => "(none)".into(),
        Value::Object(map) => map
            .iter()
            .map(|(k, v)| format!("{k}: {}", scalar(v)))
            .collect::<Vec<_>>()
            .join("\n"),
        other => scalar(other),
    }
}
