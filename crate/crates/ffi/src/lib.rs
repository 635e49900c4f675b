//! C ABI over `t3-core`.
//!
//! Every function returns a [`T3Status`]; results come back through out
//! parameters. On failure the message is kept per thread and can be read
//! with [`t3_last_error`]. Strings handed out by the library are
//! NUL-terminated JSON or ids and must be released with [`t3_string_free`].
//! Challenge handles are opaque and released with [`t3_challenge_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use t3_core::domain::{PhaseTarget, TeamId};
use t3_core::metrics::{auc_scores, bootstrap_ci, delong_paired, MetricsError, ScoredSample};
use t3_core::phase::Board;
use t3_core::platform::{
    Platform, PlatformError, PlatformOptions, SubmitOutcome, SubmitRequest, Viewer,
};
use t3_core::sandbox::Backend;

#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum T3Status {
    T3_OK = 0,
    /// A required pointer argument was null.
    T3_ERR_NULL = 1,
    /// Malformed argument: bad UTF-8, unknown name, mismatched lengths.
    T3_ERR_INVALID = 2,
    /// Inputs on which the metric is undefined, e.g. a single class.
    T3_ERR_DEGENERATE = 3,
    /// The challenge state does not allow the operation.
    T3_ERR_STATE = 4,
    T3_ERR_FORBIDDEN = 5,
    T3_ERR_NOT_FOUND = 6,
    /// A rolling submission arrived during the countdown.
    T3_ERR_REJECTED = 7,
    T3_ERR_IO = 8,
    /// A Rust panic was caught at the boundary.
    T3_ERR_PANIC = 9,
}

/// Paired DeLong comparison of two score vectors.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct T3Delong {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p_value: f64,
    /// Non-zero when the pooled variance vanished while the AUCs differ.
    pub degenerate: u8,
}

/// Opaque challenge handle.
pub struct T3Challenge {
    platform: Platform,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(T3Status, String);

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> T3Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => T3Status::T3_OK,
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("panic inside t3");
            T3Status::T3_ERR_PANIC
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        let status = match e {
            MetricsError::Degenerate(_) | MetricsError::BootstrapExhausted { .. } => {
                T3Status::T3_ERR_DEGENERATE
            }
            _ => T3Status::T3_ERR_INVALID,
        };
        Failure(status, e.to_string())
    }
}

impl From<PlatformError> for Failure {
    fn from(e: PlatformError) -> Self {
        let status = match &e {
            PlatformError::Forbidden(_) => T3Status::T3_ERR_FORBIDDEN,
            PlatformError::NotFound(_) => T3Status::T3_ERR_NOT_FOUND,
            PlatformError::Invalid(_) => T3Status::T3_ERR_INVALID,
            PlatformError::Store(_) | PlatformError::Sandbox(_) => T3Status::T3_ERR_IO,
            _ => T3Status::T3_ERR_STATE,
        };
        Failure(status, e.to_string())
    }
}

fn null() -> Failure {
    Failure(T3Status::T3_ERR_NULL, "null pointer argument".into())
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(T3Status::T3_ERR_INVALID, message.into())
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("string is not UTF-8"))
}

/// # Safety
/// `p` is null or points to `n` readable values.
unsafe fn slice<'a, T>(p: *const T, n: usize) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `out` is null or writable.
unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null());
    }
    out.write(value);
    Ok(())
}

/// Output pointers are checked before any work is done.
fn writable<T>(out: *mut T) -> Result<(), Failure> {
    if out.is_null() {
        Err(null())
    } else {
        Ok(())
    }
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .unwrap_or_default()
        .into_raw()
}

fn json(v: impl serde::Serialize) -> Result<*mut c_char, Failure> {
    serde_json::to_string(&v)
        .map(owned_string)
        .map_err(|e| Failure(T3Status::T3_ERR_IO, e.to_string()))
}

/// # Safety
/// `p` is null or points to `n` readable bytes.
unsafe fn bool_labels(p: *const u8, n: usize) -> Result<Vec<bool>, Failure> {
    Ok(slice(p, n)?.iter().map(|&l| l != 0).collect())
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated) and returns the full message length, or 0 when
/// there is none.
///
/// # Safety
/// `buf` is null or points to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn t3_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` is null or came from this library and was not freed before.
#[no_mangle]
pub unsafe extern "C" fn t3_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Midrank AUC of `scores` against binary `labels` (non-zero = positive).
///
/// # Safety
/// `scores` and `labels` point to `n` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t3_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> T3Status {
    guard(|| {
        writable(out)?;
        let value = auc_scores(slice(scores, n)?, &bool_labels(labels, n)?)?;
        put(out, value)
    })
}

/// Paired DeLong test of two score vectors over the same subjects.
///
/// # Safety
/// `a`, `b` and `labels` point to `n` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t3_delong(
    a: *const f64,
    b: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut T3Delong,
) -> T3Status {
    guard(|| {
        writable(out)?;
        let r = delong_paired(slice(a, n)?, slice(b, n)?, &bool_labels(labels, n)?)?;
        put(
            out,
            T3Delong {
                auc_a: r.auc_a,
                auc_b: r.auc_b,
                z: r.z,
                p_value: r.p_value,
                degenerate: u8::from(r.degenerate),
            },
        )
    })
}

/// Percentile bootstrap interval (2.5th, 97.5th) of the AUC.
///
/// # Safety
/// `scores` and `labels` point to `n` values; `lo` and `hi` are writable.
#[no_mangle]
pub unsafe extern "C" fn t3_bootstrap_ci(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    iterations: usize,
    seed: u64,
    lo: *mut f64,
    hi: *mut f64,
) -> T3Status {
    guard(|| {
        writable(lo)?;
        writable(hi)?;
        let samples: Vec<ScoredSample> = slice(scores, n)?
            .iter()
            .zip(bool_labels(labels, n)?)
            .enumerate()
            .map(|(i, (&score, label))| ScoredSample {
                subject_id: format!("s{i}").into(),
                score,
                label,
            })
            .collect();
        let (l, h) = bootstrap_ci(&samples, iterations, seed)?;
        put(lo, l)?;
        put(hi, h)
    })
}

/// Opens a challenge store created by `t3ctl init`. Adapters run in
/// process threads.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t3_challenge_open(
    path: *const c_char,
    out: *mut *mut T3Challenge,
) -> T3Status {
    guard(|| {
        writable(out)?;
        let path = text(path)?;
        let options = PlatformOptions {
            backend: Backend::InProcess,
            ..PlatformOptions::default()
        };
        let platform = Platform::open(path, options)?;
        put(out, Box::into_raw(Box::new(T3Challenge { platform })))
    })
}

/// # Safety
/// `handle` is null or came from [`t3_challenge_open`] and was not freed.
#[no_mangle]
pub unsafe extern "C" fn t3_challenge_free(handle: *mut T3Challenge) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` is null or a live handle.
unsafe fn challenge<'a>(handle: *const T3Challenge) -> Result<&'a Platform, Failure> {
    handle.as_ref().map(|h| &h.platform).ok_or_else(null)
}

fn viewer(role: &str) -> Result<Viewer, Failure> {
    match role.split_once(':') {
        Some(("organizer", id)) => Ok(Viewer::Organizer(id.to_owned())),
        Some(("team", id)) => Ok(Viewer::Team(TeamId::new(id))),
        _ if role == "anonymous" => Ok(Viewer::Anonymous),
        _ => Err(invalid(format!(
            "viewer must be organizer:<id>, team:<id> or anonymous, got {role:?}"
        ))),
    }
}

/// Phase, open rounds and team states as JSON.
///
/// # Safety
/// `handle` is live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t3_challenge_status_json(
    handle: *const T3Challenge,
    out: *mut *mut c_char,
) -> T3Status {
    guard(|| put(out, json(challenge(handle)?.phase_status())?))
}

/// Leaderboard `board` (`a1`, `a2`, `b`) as seen by `viewer_role`
/// (`organizer:<id>`, `team:<id>` or `anonymous`), as a JSON array.
///
/// # Safety
/// `handle` is live; strings are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn t3_challenge_leaderboard_json(
    handle: *const T3Challenge,
    board: *const c_char,
    viewer_role: *const c_char,
    out: *mut *mut c_char,
) -> T3Status {
    guard(|| {
        writable(out)?;
        let board = text(board)?;
        let board =
            Board::parse(board).ok_or_else(|| invalid(format!("unknown board {board:?}")))?;
        let entries = challenge(handle)?.leaderboard(board, &viewer(text(viewer_role)?)?)?;
        put(out, json(entries)?)
    })
}

/// Submits `payload` for `team` to `target` (`rolling_a1`, `final_a2`,
/// `ft_round1`, `ft_feedback`, `ft_round2`). On success `out_submission_id`
/// receives the new submission id. A countdown rejection returns
/// [`T3Status::T3_ERR_REJECTED`] and writes the next allowed time to
/// `out_next_allowed_at` when it is non-null.
///
/// # Safety
/// `handle` is live; strings are NUL-terminated; `out_submission_id` is
/// writable; `out_next_allowed_at` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn t3_challenge_submit(
    handle: *const T3Challenge,
    team: *const c_char,
    target: *const c_char,
    payload: *const c_char,
    confirm_renounce: u8,
    now: i64,
    out_submission_id: *mut *mut c_char,
    out_next_allowed_at: *mut i64,
) -> T3Status {
    guard(|| {
        writable(out_submission_id)?;
        let target_name = text(target)?;
        let target: PhaseTarget =
            serde_json::from_value(serde_json::Value::String(target_name.to_owned()))
                .map_err(|_| invalid(format!("unknown target {target_name:?}")))?;
        let request = SubmitRequest {
            team_id: TeamId::new(text(team)?),
            target,
            payload: text(payload)?.to_owned(),
            kind: None,
            confirm_renounce: confirm_renounce != 0,
        };
        match challenge(handle)?.submit(&request, now)? {
            SubmitOutcome::Accepted { submission_id, .. } => {
                put(out_submission_id, owned_string(submission_id.to_string()))
            }
            SubmitOutcome::Rejected { next_allowed_at } => {
                if !out_next_allowed_at.is_null() {
                    out_next_allowed_at.write(next_allowed_at);
                }
                Err(Failure(
                    T3Status::T3_ERR_REJECTED,
                    format!("next submission allowed at {next_allowed_at}"),
                ))
            }
        }
    })
}

/// Runs every queued job at clock `now` and writes how many ran.
///
/// # Safety
/// `handle` is live; `out_count` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn t3_challenge_run_pending(
    handle: *const T3Challenge,
    now: i64,
    out_count: *mut usize,
) -> T3Status {
    guard(|| {
        let ran = challenge(handle)?.run_pending(&|| now)?;
        if !out_count.is_null() {
            out_count.write(ran.len());
        }
        Ok(())
    })
}
