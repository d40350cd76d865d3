//! JSON-over-HTTP access to campaign files in a data directory.
//!
//! Each campaign is `<data_dir>/<id>.json`. Mutating steps take a
//! per-campaign lock without waiting, so a second concurrent step gets 409.
//! Propose and assess run as background jobs polled under `/jobs/{id}`.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{mpsc, Mutex as AsyncMutex, OwnedMutexGuard};

use seqoed::campaign::{CampaignSettings, CampaignState, Status};
use seqoed::io::{self, MeasurementRecord};
use seqoed::model::UnweightedDesign;
use seqoed::vle::ParamVector;
use seqoed::{Error, Result};

use crate::args::ServeArgs;
use crate::commands::{self, assess_state, create_campaign, AssessOptions, Assessment, InitialDesign};

/// Error body shared by direct responses and failed jobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic_id: Option<String>,
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Conflict(&'static str, String),
    Core(Error),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::Core(e)
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        ApiError::BadRequest(e.to_string())
    }
}

impl ApiError {
    pub fn body(&self) -> ErrorBody {
        let plain = |status: StatusCode, error: &str, message: String| ErrorBody {
            status: status.as_u16(),
            error: error.to_string(),
            message,
            diagnostic_id: None,
        };
        match self {
            ApiError::BadRequest(m) => plain(StatusCode::BAD_REQUEST, "bad_request", m.clone()),
            ApiError::NotFound(m) => plain(StatusCode::NOT_FOUND, "not_found", m.clone()),
            ApiError::Conflict(kind, m) => plain(StatusCode::CONFLICT, kind, m.clone()),
            ApiError::Core(e) => {
                let status = match e {
                    Error::Parse { .. }
                    | Error::Invalid(_)
                    | Error::Config(_)
                    | Error::Domain(_)
                    | Error::UnknownFixture(_)
                    | Error::SchemaVersion { .. }
                    | Error::Json(_)
                    | Error::Csv(_) => StatusCode::BAD_REQUEST,
                    Error::State(_) => StatusCode::CONFLICT,
                    _ => StatusCode::INTERNAL_SERVER_ERROR,
                };
                let mut b = plain(status, e.kind(), e.to_string());
                if status == StatusCode::INTERNAL_SERVER_ERROR {
                    let id = uuid::Uuid::new_v4().to_string();
                    eprintln!("diagnostic {id}: {e:?}");
                    b.diagnostic_id = Some(id);
                }
                b
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let b = self.body();
        let status = StatusCode::from_u16(b.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(b)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Propose,
    Assess,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub campaign: String,
    pub kind: JobKind,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

struct Job {
    id: String,
    campaign: String,
    task: Task,
    /// Held until the job finishes.
    _guard: OwnedMutexGuard<()>,
}

enum Task {
    Propose,
    Assess(AssessRequest),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssessRequest {
    #[serde(flatten)]
    pub options: AssessOptions,
    /// Fixture id of reference data for the prediction errors.
    #[serde(default)]
    pub reference: Option<String>,
}

pub struct AppState {
    data_dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<AsyncMutex<()>>>>,
    jobs: Mutex<HashMap<String, JobRecord>>,
    queue: mpsc::UnboundedSender<Job>,
}

impl AppState {
    /// Creates the data directory if needed and starts `workers` job
    /// workers on the current runtime.
    pub fn new(data_dir: impl Into<PathBuf>, workers: usize) -> Result<Arc<Self>> {
        let data_dir = data_dir.into();
        fs::create_dir_all(&data_dir).map_err(|source| Error::Io {
            path: data_dir.clone(),
            source,
        })?;
        let (tx, rx) = mpsc::unbounded_channel();
        let app = Arc::new(AppState {
            data_dir,
            locks: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
            queue: tx,
        });
        let rx = Arc::new(AsyncMutex::new(rx));
        for _ in 0..workers.max(1) {
            tokio::spawn(worker(app.clone(), rx.clone()));
        }
        Ok(app)
    }

    fn campaign_path(&self, id: &str) -> PathBuf {
        self.data_dir.join(format!("{id}.json"))
    }

    fn metrics_path(&self, id: &str) -> PathBuf {
        self.data_dir.join(format!("{id}.metrics.json"))
    }

    fn lock(&self, id: &str) -> ApiResult<OwnedMutexGuard<()>> {
        let m = self
            .locks
            .lock()
            .expect("lock table poisoned")
            .entry(id.to_string())
            .or_default()
            .clone();
        m.try_lock_owned()
            .map_err(|_| ApiError::Conflict("busy", format!("campaign {id} has a step in progress")))
    }

    fn load(&self, id: &str) -> ApiResult<CampaignState> {
        check_id(id)?;
        let path = self.campaign_path(id);
        if !path.exists() {
            return Err(ApiError::NotFound(format!("no campaign {id}")));
        }
        Ok(CampaignState::load(&path)?)
    }

    fn set_job(&self, rec: JobRecord) {
        self.jobs.lock().expect("job table poisoned").insert(rec.id.clone(), rec);
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut JobRecord)) {
        if let Some(rec) = self.jobs.lock().expect("job table poisoned").get_mut(id) {
            f(rec);
        }
    }

    fn enqueue(&self, campaign: &str, task: Task, guard: OwnedMutexGuard<()>) -> ApiResult<JobRecord> {
        let kind = match task {
            Task::Propose => JobKind::Propose,
            Task::Assess(_) => JobKind::Assess,
        };
        let rec = JobRecord {
            id: uuid::Uuid::new_v4().to_string(),
            campaign: campaign.to_string(),
            kind,
            status: JobStatus::Queued,
            result: None,
            error: None,
        };
        self.set_job(rec.clone());
        self.queue
            .send(Job {
                id: rec.id.clone(),
                campaign: campaign.to_string(),
                task,
                _guard: guard,
            })
            .map_err(|_| ApiError::Core(Error::State("job queue is closed".into())))?;
        Ok(rec)
    }

    fn execute(&self, job: &Job) -> ApiResult<Value> {
        let state = self.load(&job.campaign)?;
        match &job.task {
            Task::Propose => {
                let next = state.propose(&commands::model())?;
                next.save(&self.campaign_path(&job.campaign))?;
                Ok(proposal_summary(&job.campaign, &next))
            }
            Task::Assess(req) => {
                let reference = req
                    .reference
                    .as_deref()
                    .map(|r| io::fixture(r).and_then(|rows| io::to_dataset(&rows)))
                    .transpose()?;
                let a = assess_state(&state, reference.as_ref(), &req.options)?;
                io::write_json_atomic(&self.metrics_path(&job.campaign), &a)?;
                Ok(serde_json::to_value(&a).map_err(Error::from)?)
            }
        }
    }
}

async fn worker(app: Arc<AppState>, rx: Arc<AsyncMutex<mpsc::UnboundedReceiver<Job>>>) {
    loop {
        let job = rx.lock().await.recv().await;
        let Some(job) = job else { break };
        let id = job.id.clone();
        app.update_job(&id, |r| r.status = JobStatus::Running);
        let worker_app = app.clone();
        let outcome = tokio::task::spawn_blocking(move || worker_app.execute(&job)).await;
        let outcome = match outcome {
            Ok(r) => r,
            Err(e) => Err(ApiError::Core(Error::State(format!("job panicked: {e}")))),
        };
        app.update_job(&id, |r| match outcome {
            Ok(v) => {
                r.status = JobStatus::Succeeded;
                r.result = Some(v);
            }
            Err(e) => {
                r.status = JobStatus::Failed;
                r.error = Some(e.body());
            }
        });
    }
}

fn check_id(id: &str) -> ApiResult<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(ApiError::BadRequest(format!(
            "campaign id `{id}` must be 1-64 characters from [A-Za-z0-9_-]"
        )))
    }
}

/// Rejects the request when an `If-Match` header names another state.
fn check_if_match(headers: &HeaderMap, state: &CampaignState) -> ApiResult<()> {
    if let Some(v) = headers.get(header::IF_MATCH) {
        let want = v.to_str().unwrap_or("").trim().trim_matches('"');
        let have = state.state_hash();
        if want != have {
            return Err(ApiError::Conflict(
                "stale_state",
                format!("campaign state is {have}, request expected {want}"),
            ));
        }
    }
    Ok(())
}

fn state_response(id: &str, state: &CampaignState) -> Value {
    json!({
        "id": id,
        "state_hash": state.state_hash(),
        "status": state.status,
        "design_size": state.design_size(),
        "state": state,
    })
}

fn points_json(d: &UnweightedDesign) -> Vec<Vec<f64>> {
    d.points.iter().map(|x| x.coords().to_vec()).collect()
}

fn proposal_summary(id: &str, state: &CampaignState) -> Value {
    let rec = state.history.last().expect("a proposal was just made");
    json!({
        "id": id,
        "state_hash": state.state_hash(),
        "status": state.status,
        "iteration": rec.iteration,
        "batch": points_json(&rec.batch),
        "label": state.pending.as_ref().map(|p| p.label.clone()),
        "distances": rec.distances,
        "outcome": rec.outcome,
        "final_batch": state.pending.as_ref().is_some_and(|p| p.final_batch),
        "estimate": rec.estimate,
        "solve": {
            "iterations": rec.report.iterations,
            "support": points_json(&UnweightedDesign::new(
                rec.report.design.support().map(|(_, x)| x.clone()).collect())),
            "weights": rec.report.design.weights(),
            "min_sensitivity": rec.report.min_sensitivity,
            "threshold": rec.report.threshold,
            "certified": rec.report.certified(),
            "criterion_value": rec.report.criterion_value,
        },
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    settings: CampaignSettings,
    /// Planned initial points `[l, P]`.
    #[serde(default)]
    initial_design: Option<Vec<[f64; 2]>>,
    /// Measured initial design as CSV text.
    #[serde(default)]
    measurements_csv: Option<String>,
    /// Bundled fixture id as the measured initial design.
    #[serde(default)]
    fixture: Option<String>,
}

async fn create(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateRequest = serde_json::from_slice(&body)?;
    let initial = match (req.initial_design, req.measurements_csv, req.fixture) {
        (Some(points), None, None) => {
            let text = std::iter::once("l,P".to_string())
                .chain(points.iter().map(|p| format!("{},{}", p[0], p[1])))
                .collect::<Vec<_>>()
                .join("\n");
            InitialDesign::Planned(io::read_design(&text)?)
        }
        (None, Some(csv), None) => InitialDesign::Measured(io::read_measurements(&csv)?),
        (None, None, Some(f)) => InitialDesign::Measured(io::fixture(&f)?),
        _ => {
            return Err(ApiError::BadRequest(
                "give exactly one of initial_design, measurements_csv, fixture".into(),
            ))
        }
    };
    let id = req.id.unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    check_id(&id)?;
    let _guard = app.lock(&id)?;
    let path = app.campaign_path(&id);
    if path.exists() {
        return Err(ApiError::Conflict("exists", format!("campaign {id} already exists")));
    }
    let state = create_campaign(req.settings, initial)?;
    state.save(&path)?;
    Ok((StatusCode::CREATED, Json(state_response(&id, &state))).into_response())
}

async fn list(State(app): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let mut ids = Vec::new();
    let entries = fs::read_dir(&app.data_dir).map_err(|source| Error::Io {
        path: app.data_dir.clone(),
        source,
    })?;
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(id) = name.strip_suffix(".json") {
            if !id.ends_with(".metrics") && check_id(id).is_ok() {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    Ok(Json(json!({ "campaigns": ids })))
}

async fn get_state(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let state = app.load(&id)?;
    Ok(Json(state_response(&id, &state)))
}

/// Measurement rows from a JSON body (`{"records": [...]}` or a bare array)
/// or from CSV text.
fn parse_rows(headers: &HeaderMap, body: &[u8], force_csv: bool) -> ApiResult<Vec<MeasurementRecord>> {
    let is_csv = force_csv
        || headers
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.starts_with("text/csv") || v.starts_with("text/plain"));
    if is_csv {
        let text = std::str::from_utf8(body).map_err(|e| ApiError::BadRequest(format!("body is not UTF-8: {e}")))?;
        return Ok(io::read_measurements(text)?);
    }
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Rows {
        Wrapped { records: Vec<MeasurementRecord> },
        Bare(Vec<MeasurementRecord>),
    }
    let rows = match serde_json::from_slice::<Rows>(body)? {
        Rows::Wrapped { records } => records,
        Rows::Bare(r) => r,
    };
    for (i, r) in rows.iter().enumerate() {
        r.validate(i + 1)?;
    }
    Ok(rows)
}

fn record_rows(app: &AppState, id: &str, headers: &HeaderMap, body: &[u8], force_csv: bool) -> ApiResult<Json<Value>> {
    check_id(id)?;
    let _guard = app.lock(id)?;
    let state = app.load(id)?;
    check_if_match(headers, &state)?;
    let rows = parse_rows(headers, body, force_csv)?;
    let next = state.record(rows)?;
    next.save(&app.campaign_path(id))?;
    Ok(Json(json!({
        "id": id,
        "state_hash": next.state_hash(),
        "status": next.status,
        "design_size": next.design_size(),
    })))
}

async fn post_measurements(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    record_rows(&app, &id, &headers, &body, false)
}

async fn import_csv(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    record_rows(&app, &id, &headers, &body, true)
}

fn csv_response(text: String) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], text).into_response()
}

async fn export_csv(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let state = app.load(&id)?;
    Ok(csv_response(io::write_measurements(&state.measurements)))
}

async fn pending_csv(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let state = app.load(&id)?;
    let p = state
        .pending
        .as_ref()
        .ok_or_else(|| ApiError::Conflict("state", format!("campaign {id} has no pending batch")))?;
    Ok(csv_response(io::write_design(&p.points)))
}

fn accepted(job: &JobRecord) -> Response {
    (
        StatusCode::ACCEPTED,
        Json(json!({
            "job_id": job.id,
            "status": job.status,
            "poll": format!("/jobs/{}", job.id),
        })),
    )
        .into_response()
}

async fn propose(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    check_id(&id)?;
    let guard = app.lock(&id)?;
    let state = app.load(&id)?;
    check_if_match(&headers, &state)?;
    if state.status != Status::ReadyToPropose {
        return Err(ApiError::Core(Error::State(format!(
            "cannot propose in state {}",
            serde_json::to_value(state.status).map_err(Error::from)?
        ))));
    }
    let job = app.enqueue(&id, Task::Propose, guard)?;
    Ok(accepted(&job))
}

async fn assess(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Response> {
    check_id(&id)?;
    let req: AssessRequest = if body.is_empty() {
        AssessRequest::default()
    } else {
        serde_json::from_slice(&body)?
    };
    if let Some(r) = &req.reference {
        io::fixture(r)?;
    }
    let guard = app.lock(&id)?;
    let state = app.load(&id)?;
    if state.measurements.is_empty() {
        return Err(ApiError::Core(Error::State("campaign has no measurements to assess".into())));
    }
    let job = app.enqueue(&id, Task::Assess(req), guard)?;
    Ok(accepted(&job))
}

/// Cached metrics when they belong to the current state, otherwise the
/// linearized metrics computed on the spot.
async fn metrics(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Assessment>> {
    Ok(Json(current_metrics(app, id).await?))
}

async fn current_metrics(app: Arc<AppState>, id: String) -> ApiResult<Assessment> {
    let state = app.load(&id)?;
    let cache = app.metrics_path(&id);
    if cache.exists() {
        let a: Assessment = io::read_json(&cache)?;
        if a.state_hash == state.state_hash() {
            return Ok(a);
        }
    }
    let a = tokio::task::spawn_blocking(move || assess_state(&state, None, &AssessOptions::default()))
        .await
        .map_err(|e| ApiError::Core(Error::State(format!("metrics task failed: {e}"))))??;
    io::write_json_atomic(&cache, &a)?;
    Ok(a)
}

async fn curves_csv(
    State(app): State<Arc<AppState>>,
    UrlPath((id, kind)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let a = current_metrics(app, id).await?;
    let text = match kind.as_str() {
        "lin" => a.lin_csv()?,
        "sam" => a
            .sam_csv()?
            .ok_or_else(|| ApiError::NotFound("no sampling metrics; POST assess with sampling first".into()))?,
        _ => return Err(ApiError::NotFound(format!("unknown curve kind {kind} (lin or sam)"))),
    };
    Ok(csv_response(text))
}

fn parse_list(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<Vec<f64>>> {
    q.get(key)
        .map(|s| {
            s.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| ApiError::BadRequest(format!("`{t}` in {key} is not a number")))
                })
                .collect()
        })
        .transpose()
}

const MAX_CURVE_POINTS: usize = 1001;
const MAX_PRESSURES: usize = 20;

fn txy_response(q: &HashMap<String, String>, theta: ParamVector) -> ApiResult<Json<Value>> {
    let pressures = parse_list(q, "pressures")?.unwrap_or_else(|| vec![1e5]);
    if pressures.is_empty() || pressures.len() > MAX_PRESSURES {
        return Err(ApiError::BadRequest(format!("give 1 to {MAX_PRESSURES} pressures")));
    }
    let n = match q.get("points") {
        Some(s) => s
            .parse::<usize>()
            .map_err(|_| ApiError::BadRequest(format!("points `{s}` is not a count")))?,
        None => 101,
    };
    if !(2..=MAX_CURVE_POINTS).contains(&n) {
        return Err(ApiError::BadRequest(format!("points must lie in 2..={MAX_CURVE_POINTS}")));
    }
    let system = commands::model().system;
    let mut curves = Vec::new();
    for p in pressures {
        if p <= 0.0 {
            return Err(ApiError::BadRequest(format!("pressure {p} must be positive")));
        }
        curves.push(json!({ "pressure": p, "points": system.txy(p, &theta, n)? }));
    }
    Ok(Json(json!({ "theta": theta, "curves": curves })))
}

/// T–x–y data for given parameters (`theta=a12,a21,b12,b21,c12`), the
/// shipped all-data estimate by default.
async fn prediction_curves(Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<Value>> {
    let theta = match parse_list(&q, "theta")? {
        Some(t) => ParamVector::from_slice(&t)?,
        None => io::theta_tot_fixture(),
    };
    txy_response(&q, theta)
}

async fn campaign_curves(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let state = app.load(&id)?;
    let e = state
        .estimate
        .as_ref()
        .ok_or_else(|| ApiError::Conflict("state", format!("campaign {id} has no estimate yet")))?;
    txy_response(&q, ParamVector::from_slice(&e.theta)?)
}

async fn get_job(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobRecord>> {
    app.jobs
        .lock()
        .expect("job table poisoned")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("no job {id}")))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/campaigns", get(list).post(create))
        .route("/campaigns/{id}", get(get_state))
        .route("/campaigns/{id}/measurements", post(post_measurements))
        .route("/campaigns/{id}/measurements.csv", get(export_csv).post(import_csv))
        .route("/campaigns/{id}/pending.csv", get(pending_csv))
        .route("/campaigns/{id}/propose", post(propose))
        .route("/campaigns/{id}/assess", post(assess))
        .route("/campaigns/{id}/metrics", get(metrics))
        .route("/campaigns/{id}/curves/{kind}", get(curves_csv))
        .route("/campaigns/{id}/prediction-curves", get(campaign_curves))
        .route("/prediction-curves", get(prediction_curves))
        .route("/jobs/{id}", get(get_job))
        .with_state(app)
}

pub fn run(args: ServeArgs) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|source| Error::Io {
            path: "<runtime>".into(),
            source,
        })?;
    rt.block_on(async move {
        let app = AppState::new(&args.data_dir, args.workers)?;
        let listener = tokio::net::TcpListener::bind(args.addr).await.map_err(|source| Error::Io {
            path: args.addr.to_string().into(),
            source,
        })?;
        eprintln!(
            "serving campaigns from {} on http://{}",
            args.data_dir.display(),
            args.addr
        );
        axum::serve(listener, router(app))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|source| Error::Io {
                path: args.addr.to_string().into(),
                source,
            })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_status_mapping() {
        let parse = Error::Parse {
            row: 1,
            column: "v".into(),
            message: "x".into(),
        };
        assert_eq!(ApiError::from(parse).body().status, 400);
        assert_eq!(ApiError::from(Error::State("x".into())).body().status, 409);
        let b = ApiError::from(Error::Convergence {
            what: "solver",
            detail: "x".into(),
        })
        .body();
        assert_eq!(b.status, 500);
        assert_eq!(b.error, "convergence");
        assert!(b.diagnostic_id.is_some());
        assert!(ApiError::from(Error::Invalid("x".into())).body().diagnostic_id.is_none());
    }

    #[test]
    fn campaign_ids() {
        assert!(check_id("run-1_a").is_ok());
        for bad in ["", "../x", "a b", &"x".repeat(65)] {
            assert!(check_id(bad).is_err(), "{bad}");
        }
    }
}
