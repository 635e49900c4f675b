//! HTTP+JSON API over a [`Platform`].
//!
//! Callers authenticate with `Authorization: Bearer <token>`; tokens are
//! provisioned in the service config and map to an organizer or a team.
//! Requests without a token are anonymous. Every response carries the
//! server clock in `x-server-time` so countdowns can be shown without
//! trusting the client clock.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use crate::domain::{PhaseTarget, SubmissionId, SubmissionKind, Team, TeamId, Timestamp};
use crate::metrics::DisplayFilter;
use crate::phase::{Board, PhaseError, Round};
use crate::platform::{Platform, PlatformError, SubmitOutcome, SubmitRequest, Viewer};
use crate::review::{ReviewDecision, ReviewError};

pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs() as Timestamp)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Run queued jobs in the background after each accepted submission.
    pub auto_run: bool,
    /// token → `organizer:<id>` or `team:<team_id>`
    pub tokens: BTreeMap<String, String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            auto_run: true,
            tokens: BTreeMap::new(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let config: Self = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        config.viewers()?;
        Ok(config)
    }

    fn viewers(&self) -> Result<BTreeMap<String, Viewer>, String> {
        self.tokens
            .iter()
            .map(|(token, role)| {
                let viewer = match role.split_once(':') {
                    Some(("organizer", id)) if !id.is_empty() => Viewer::Organizer(id.to_owned()),
                    Some(("team", id)) if !id.is_empty() => Viewer::Team(TeamId::new(id)),
                    _ => {
                        return Err(format!(
                            "token role must be organizer:<id> or team:<id>, got {role:?}"
                        ))
                    }
                };
                Ok((token.clone(), viewer))
            })
            .collect()
    }
}

#[derive(Clone)]
pub struct AppState {
    platform: Arc<Platform>,
    viewers: Arc<BTreeMap<String, Viewer>>,
    clock: Clock,
    auto_run: bool,
}

impl AppState {
    pub fn new(
        platform: Arc<Platform>,
        config: &ServiceConfig,
        clock: Clock,
    ) -> Result<Self, String> {
        Ok(Self {
            platform,
            viewers: Arc::new(config.viewers()?),
            clock,
            auto_run: config.auto_run,
        })
    }

    fn viewer(&self, headers: &HeaderMap) -> Result<Viewer, ApiError> {
        let Some(value) = headers.get(header::AUTHORIZATION) else {
            return Ok(Viewer::Anonymous);
        };
        let token = value
            .to_str()
            .ok()
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| {
                ApiError::new(
                    StatusCode::UNAUTHORIZED,
                    "unauthenticated",
                    "malformed authorization header",
                )
            })?;
        self.viewers.get(token.trim()).cloned().ok_or_else(|| {
            ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", "unknown token")
        })
    }

    fn spawn_jobs(&self) {
        if !self.auto_run {
            return;
        }
        let platform = self.platform.clone();
        let clock = self.clock.clone();
        tokio::task::spawn_blocking(move || {
            if let Err(e) = platform.run_pending(&*clock) {
                tracing::error!("background jobs: {e}");
            }
        });
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"code": code, "message": message.into()}),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        let message = e.to_string();
        let (status, code) = match &e {
            PlatformError::Forbidden(_) => (StatusCode::FORBIDDEN, "forbidden"),
            PlatformError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            PlatformError::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            PlatformError::Phase(p) => phase_status(p),
            PlatformError::Review(r) => review_status(r),
            PlatformError::Metrics(_) => (StatusCode::CONFLICT, "metrics"),
            PlatformError::Store(_) | PlatformError::Sandbox(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        Self::new(status, code, message)
    }
}

fn review_status(e: &ReviewError) -> (StatusCode, &'static str) {
    match e {
        ReviewError::Unauthorized(_) => (StatusCode::FORBIDDEN, "forbidden"),
        ReviewError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
        ReviewError::AlreadyDecided(_) => (StatusCode::CONFLICT, "already_decided"),
        ReviewError::Policy { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

fn phase_status(e: &PhaseError) -> (StatusCode, &'static str) {
    match e {
        PhaseError::SingleSubmission(_) => (StatusCode::CONFLICT, "single_submission"),
        PhaseError::WrongPhase { .. } => (StatusCode::CONFLICT, "wrong_phase"),
        PhaseError::RoundNotOpen(_) => (StatusCode::CONFLICT, "round_not_open"),
        PhaseError::DeadlinePassed { .. } => (StatusCode::CONFLICT, "deadline_passed"),
        PhaseError::Round1InFlight(_) => (StatusCode::CONFLICT, "round1_in_flight"),
        PhaseError::Round1Missing(_) => (StatusCode::CONFLICT, "round1_missing"),
        PhaseError::JobsInFlight(_) => (StatusCode::CONFLICT, "jobs_in_flight"),
        PhaseError::JobState { .. } => (StatusCode::CONFLICT, "job_state"),
        PhaseError::ConfirmationRequired => {
            (StatusCode::UNPROCESSABLE_ENTITY, "confirmation_required")
        }
        PhaseError::WrongKind { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "wrong_kind"),
        PhaseError::Domain(_) | PhaseError::Config(_) => {
            (StatusCode::UNPROCESSABLE_ENTITY, "invalid")
        }
        PhaseError::NotFinalist(_) => (StatusCode::FORBIDDEN, "not_finalist"),
        PhaseError::UnknownTeam(_)
        | PhaseError::UnknownJob(_)
        | PhaseError::UnknownSubmission(_) => (StatusCode::NOT_FOUND, "not_found"),
        PhaseError::Review(r) => review_status(r),
        PhaseError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs blocking platform work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, PlatformError> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            e.to_string(),
        )),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/teams", post(create_team))
        .route("/submissions", post(create_submission))
        .route("/submissions/{id}", get(get_submission))
        .route("/leaderboards/{board}", get(get_leaderboard))
        .route("/evals/{submission_id}", get(get_evals))
        .route("/review-queue", get(get_review_queue))
        .route("/review-queue/{id}/decision", post(post_decision))
        .route("/rounds/{round}/{action}", post(post_round))
        .route("/rank-matrix", get(get_rank_matrix))
        .route("/final-report", get(get_final_report))
        .layer(DefaultBodyLimit::max(1 << 20))
        .layer(middleware::from_fn_with_state(state.clone(), server_time))
        .with_state(state)
}

async fn server_time(
    State(state): State<AppState>,
    request: axum::extract::Request,
    next: Next,
) -> Response {
    let mut response = next.run(request).await;
    if let Ok(v) = HeaderValue::from_str(&(state.clock)().to_string()) {
        response.headers_mut().insert("x-server-time", v);
    }
    response
}

async fn status(State(state): State<AppState>) -> ApiResult<serde_json::Value> {
    let status = state.platform.phase_status();
    Ok(Json(
        json!({"server_time": (state.clock)(), "status": status}),
    ))
}

async fn create_team(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(team): Json<Team>,
) -> Result<Response, ApiError> {
    if !matches!(state.viewer(&headers)?, Viewer::Organizer(_)) {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "forbidden",
            "organizer role required",
        ));
    }
    let now = (state.clock)();
    let team_id = team.team_id.clone();
    let platform = state.platform.clone();
    blocking(move || platform.register_team(team, now)).await?;
    Ok((StatusCode::CREATED, Json(json!({"team_id": team_id}))).into_response())
}

/// The `metadata` part of a submission upload.
#[derive(Debug, Deserialize)]
struct SubmissionMetadata {
    #[serde(default)]
    team_id: Option<TeamId>,
    phase_target: PhaseTarget,
    #[serde(default)]
    kind: Option<SubmissionKind>,
    #[serde(default)]
    confirm_renounce: bool,
}

async fn create_submission(
    State(state): State<AppState>,
    headers: HeaderMap,
    mut multipart: Multipart,
) -> Result<Response, ApiError> {
    let viewer = state.viewer(&headers)?;
    let mut metadata: Option<SubmissionMetadata> = None;
    let mut payload: Option<String> = None;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_owned();
        let text = field
            .text()
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        match name.as_str() {
            "metadata" => {
                metadata = Some(
                    serde_json::from_str(&text)
                        .map_err(|e| ApiError::bad_request(format!("metadata: {e}")))?,
                )
            }
            "payload" => payload = Some(text),
            other => return Err(ApiError::bad_request(format!("unexpected part {other:?}"))),
        }
    }
    let metadata = metadata.ok_or_else(|| ApiError::bad_request("missing metadata part"))?;
    let payload = payload.ok_or_else(|| ApiError::bad_request("missing payload part"))?;
    let team_id = match (&viewer, metadata.team_id) {
        (Viewer::Team(own), None) => own.clone(),
        (Viewer::Team(own), Some(t)) if *own == t => t,
        (Viewer::Organizer(_), Some(t)) => t,
        (Viewer::Organizer(_), None) => {
            return Err(ApiError::bad_request("organizer submissions need team_id"))
        }
        _ => {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "forbidden",
                "teams submit only for themselves",
            ))
        }
    };
    let request = SubmitRequest {
        team_id,
        target: metadata.phase_target,
        payload,
        kind: metadata.kind,
        confirm_renounce: metadata.confirm_renounce,
    };
    let now = (state.clock)();
    let platform = state.platform.clone();
    let outcome = blocking(move || platform.submit(&request, now)).await?;
    match outcome {
        SubmitOutcome::Accepted { .. } => {
            state.spawn_jobs();
            Ok((StatusCode::OK, Json(outcome)).into_response())
        }
        SubmitOutcome::Rejected { next_allowed_at } => Ok((
            StatusCode::TOO_MANY_REQUESTS,
            Json(json!({
                "code": "countdown",
                "message": format!("next submission allowed at {next_allowed_at}"),
                "next_allowed_at": next_allowed_at,
            })),
        )
            .into_response()),
    }
}

async fn get_submission(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<crate::platform::SubmissionView> {
    let viewer = state.viewer(&headers)?;
    Ok(Json(
        state
            .platform
            .submission_view(&SubmissionId::new(id), &viewer)?,
    ))
}

async fn get_leaderboard(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(board): UrlPath<String>,
) -> ApiResult<serde_json::Value> {
    let viewer = state.viewer(&headers)?;
    let board = Board::parse(&board).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("no board {board:?}"),
        )
    })?;
    let entries = state.platform.leaderboard(board, &viewer)?;
    Ok(Json(json!({"board": board, "entries": entries})))
}

async fn get_evals(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Vec<crate::platform::EvalReport>> {
    let viewer = state.viewer(&headers)?;
    let platform = state.platform.clone();
    Ok(Json(
        blocking(move || platform.eval_reports(&SubmissionId::new(id), &viewer)).await?,
    ))
}

async fn get_review_queue(
    State(state): State<AppState>,
    headers: HeaderMap,
) -> ApiResult<Vec<crate::review::ReviewQueueEntry>> {
    let viewer = state.viewer(&headers)?;
    Ok(Json(state.platform.review_queue(&viewer)?))
}

#[derive(Debug, Deserialize)]
struct DecisionBody {
    decision: ReviewDecision,
    #[serde(default)]
    edits: Option<String>,
}

async fn post_decision(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<DecisionBody>,
) -> ApiResult<crate::review::ReviewQueueEntry> {
    let viewer = state.viewer(&headers)?;
    let now = (state.clock)();
    let platform = state.platform.clone();
    Ok(Json(
        blocking(move || platform.decide_review(&id, body.decision, &viewer, body.edits, now))
            .await?,
    ))
}

#[derive(Debug, Default, Deserialize)]
struct CloseBody {
    /// Qualification close only: teams that decline the finalist invitation.
    #[serde(default)]
    declined: Vec<TeamId>,
}

/// `round` is `round1`, `feedback` or `round2`; `qualification/close` and
/// `final/close` end the two phases.
async fn post_round(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath((round, action)): UrlPath<(String, String)>,
    body: Option<Json<Option<CloseBody>>>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let viewer = state.viewer(&headers)?;
    if !matches!(viewer, Viewer::Organizer(_)) {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "forbidden",
            "organizer role required",
        ));
    }
    let now = (state.clock)();
    let platform = state.platform.clone();
    let declined = body
        .and_then(|b| b.0)
        .map(|b| b.declined)
        .unwrap_or_default();
    let result = match (round.as_str(), action.as_str()) {
        ("qualification", "close") => {
            let finalists =
                blocking(move || platform.close_qualification(|t| !declined.contains(t), now))
                    .await?;
            json!({"finalists": finalists})
        }
        ("final", "close") => {
            let plan = blocking(move || platform.close_final(now)).await?;
            state.spawn_jobs();
            json!({"test_b_jobs": plan.jobs.len(), "excluded": plan.excluded})
        }
        (r, "open" | "close") => {
            let r = Round::parse(r).ok_or_else(|| {
                ApiError::new(
                    StatusCode::NOT_FOUND,
                    "not_found",
                    format!("no round {r:?}"),
                )
            })?;
            let open = action == "open";
            blocking(move || {
                if open {
                    platform.open_round(r, now)
                } else {
                    platform.close_round(r, now)
                }
            })
            .await?;
            json!({"round": r, "open": open})
        }
        _ => {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "not_found",
                format!("no action {action:?}"),
            ))
        }
    };
    Ok(Json(result))
}

#[derive(Debug, Deserialize)]
struct RankQuery {
    filter: String,
}

async fn get_rank_matrix(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<RankQuery>,
) -> ApiResult<crate::metrics::RankMatrix> {
    let viewer = state.viewer(&headers)?;
    let filter = DisplayFilter::parse(&q.filter)
        .ok_or_else(|| ApiError::bad_request(format!("unknown filter {:?}", q.filter)))?;
    let platform = state.platform.clone();
    Ok(Json(
        blocking(move || platform.rank_matrix(filter, &viewer)).await?,
    ))
}

async fn get_final_report(
    State(state): State<AppState>,
    headers: HeaderMap,
) -> ApiResult<crate::platform::FinalReport> {
    let viewer = state.viewer(&headers)?;
    let platform = state.platform.clone();
    Ok(Json(
        blocking(move || platform.final_report(&viewer)).await?,
    ))
}

/// A running server. Dropping the handle leaves it running; call
/// [`ServiceHandle::shutdown`] to stop it.
pub struct ServiceHandle {
    pub local_addr: SocketAddr,
    stop: oneshot::Sender<()>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl ServiceHandle {
    /// Stops accepting connections and waits for in-flight requests.
    pub async fn shutdown(self) -> std::io::Result<()> {
        let _ = self.stop.send(());
        self.task.await.map_err(std::io::Error::other)?
    }
}

/// Binds `addr` and serves in the background of the current runtime.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<ServiceHandle> {
    let listener = TcpListener::bind(addr).await?;
    let local_addr = listener.local_addr()?;
    let (stop, stopped) = oneshot::channel();
    let app = router(state);
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    tracing::info!("listening on {local_addr}");
    Ok(ServiceHandle {
        local_addr,
        stop,
        task,
    })
}
