//! HTTP generation service: a FIFO job queue drained by a fixed pool of
//! compute threads, with a shared job table that status reads only lock
//! briefly.

use std::collections::HashMap;
use std::panic::AssertUnwindSafe;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sdfgen_core::conditioners::ConditionPayload;
use sdfgen_core::geometry::marching_cubes;
use sdfgen_core::pipeline::{Catalog, CatalogView, ConditionRequest, ModelStack};

/// Body of `POST /api/generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub conditions: Vec<ConditionRequest>,
    pub seed: u64,
    /// Reverse steps; `None` runs the full schedule.
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    /// Transitions only move forward: queued → running → done | failed.
    pub fn can_advance_to(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done | JobState::Failed)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub queued_seconds: Option<f64>,
    pub run_seconds: Option<f64>,
}

/// A generation job and its outcome.
#[derive(Clone, Debug)]
pub struct JobRecord {
    pub id: String,
    pub request: GenerateRequest,
    pub state: JobState,
    pub progress: f64,
    pub error: Option<JobError>,
    pub mesh: Option<Arc<String>>,
    pub mesh_path: Option<PathBuf>,
    submitted: Instant,
    started: Option<Instant>,
    finished: Option<Instant>,
}

impl JobRecord {
    fn new(id: String, request: GenerateRequest) -> Self {
        Self {
            id,
            request,
            state: JobState::Queued,
            progress: 0.0,
            error: None,
            mesh: None,
            mesh_path: None,
            submitted: Instant::now(),
            started: None,
            finished: None,
        }
    }

    fn advance(&mut self, next: JobState) {
        assert!(self.state.can_advance_to(next), "job {} cannot go from {:?} to {:?}", self.id, self.state, next);
        self.state = next;
        match next {
            JobState::Running => self.started = Some(Instant::now()),
            JobState::Done | JobState::Failed => self.finished = Some(Instant::now()),
            JobState::Queued => {}
        }
    }

    pub fn timings(&self) -> Timings {
        let secs = |a: Instant, b: Instant| b.duration_since(a).as_secs_f64();
        Timings {
            queued_seconds: self.started.map(|s| secs(self.submitted, s)),
            run_seconds: self.started.zip(self.finished).map(|(s, f)| secs(s, f)),
        }
    }

    pub fn view(&self) -> JobView {
        JobView {
            job_id: self.id.clone(),
            state: self.state,
            progress: self.progress,
            error: self.error.clone(),
            mesh: self.mesh.as_deref().cloned(),
            mesh_path: self.mesh_path.clone(),
            timings: self.timings(),
        }
    }
}

/// Body of `GET /api/jobs/{id}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: String,
    pub state: JobState,
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<JobError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh_path: Option<PathBuf>,
    pub timings: Timings,
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub queue_capacity: usize,
    /// Compute threads; zero leaves jobs queued (useful for tests).
    pub workers: usize,
    pub results: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            queue_capacity: 8,
            workers: 1,
            results: None,
        }
    }
}

struct Job {
    id: String,
    conditions: Vec<(ConditionPayload, f64)>,
    seed: u64,
    steps: Option<usize>,
}

struct Shared {
    stack: ModelStack,
    catalog: Catalog,
    catalog_view: CatalogView,
    jobs: RwLock<HashMap<String, JobRecord>>,
    next_id: AtomicU64,
    /// Run time of the most recent job, for the retry hint.
    last_run_ms: AtomicU64,
    config: ServiceConfig,
}

impl Shared {
    fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord)) {
        let mut jobs = self.jobs.write().unwrap_or_else(|e| e.into_inner());
        if let Some(job) = jobs.get_mut(id) {
            f(job);
        }
    }

    fn retry_after_seconds(&self) -> u64 {
        let per_job = self.last_run_ms.load(Ordering::Relaxed).max(1000);
        (per_job * self.config.queue_capacity as u64).div_ceil(1000 * self.config.workers.max(1) as u64)
    }
}

/// A running service: the router plus its compute threads.
pub struct Service {
    shared: Arc<Shared>,
    queue: SyncSender<Job>,
    workers: Vec<JoinHandle<()>>,
    // Held so the queue stays open even with no workers.
    _rx: Arc<Mutex<Receiver<Job>>>,
}

#[derive(Clone)]
struct AppState {
    shared: Arc<Shared>,
    queue: SyncSender<Job>,
}

impl Service {
    pub fn start(stack: ModelStack, catalog: Catalog, config: ServiceConfig) -> std::io::Result<Self> {
        if config.queue_capacity == 0 {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "queue capacity must be positive"));
        }
        let (queue, rx) = mpsc::sync_channel::<Job>(config.queue_capacity);
        let shared = Arc::new(Shared {
            catalog_view: catalog.view(),
            stack,
            catalog,
            jobs: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            last_run_ms: AtomicU64::new(0),
            config,
        });
        if let Some(dir) = &shared.config.results {
            std::fs::create_dir_all(dir)?;
        }
        let rx = Arc::new(Mutex::new(rx));
        let workers = (0..shared.config.workers)
            .map(|i| {
                let (shared, rx) = (shared.clone(), rx.clone());
                std::thread::Builder::new()
                    .name(format!("sdfgen-worker-{i}"))
                    .spawn(move || worker_loop(&shared, &rx))
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        Ok(Self {
            shared,
            queue,
            workers,
            _rx: rx,
        })
    }

    pub fn router(&self) -> Router {
        let state = AppState {
            shared: self.shared.clone(),
            queue: self.queue.clone(),
        };
        Router::new()
            .route("/api/generate", post(generate))
            .route("/api/jobs/{id}", get(job_status))
            .route("/api/catalog", get(catalog))
            .route("/api/health", get(health))
            .with_state(state)
    }

    /// Snapshot of one job.
    pub fn job(&self, id: &str) -> Option<JobView> {
        let jobs = self.shared.jobs.read().unwrap_or_else(|e| e.into_inner());
        jobs.get(id).map(JobRecord::view)
    }

    /// Stop accepting work and wait for the compute threads to drain.
    pub fn shutdown(self, router: Router) {
        drop(router);
        drop(self.queue);
        for w in self.workers {
            let _ = w.join();
        }
    }
}

fn worker_loop(shared: &Shared, rx: &Mutex<Receiver<Job>>) {
    loop {
        let job = {
            let rx = rx.lock().unwrap_or_else(|e| e.into_inner());
            match rx.recv() {
                Ok(job) => job,
                Err(_) => return,
            }
        };
        run_job(shared, job);
    }
}

fn run_job(shared: &Shared, job: Job) {
    shared.update(&job.id, |r| r.advance(JobState::Running));
    let t0 = Instant::now();
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| {
        let mut progress = |f: f64| shared.update(&job.id, |r| r.progress = f);
        shared
            .stack
            .generate(&job.conditions, job.seed, job.steps, Some(&mut progress))
            .map(|grid| marching_cubes(&grid, 0.0).to_obj())
    }));
    shared.last_run_ms.store(t0.elapsed().as_millis() as u64, Ordering::Relaxed);
    let result = match outcome {
        Ok(Ok(obj)) => write_mesh(shared, &job.id, &obj).map(|path| (obj, path)),
        Ok(Err(e)) => Err(JobError {
            kind: error_kind(&e).into(),
            message: e.to_string(),
        }),
        Err(panic) => Err(JobError {
            kind: "internal".into(),
            message: panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "generation panicked".into()),
        }),
    };
    match &result {
        Ok(_) => log::info!("job {} done in {:.2?}", job.id, t0.elapsed()),
        Err(e) => log::warn!("job {} failed: {}", job.id, e.message),
    }
    shared.update(&job.id, |r| match result {
        Ok((obj, path)) => {
            r.mesh = Some(Arc::new(obj));
            r.mesh_path = path;
            r.progress = 1.0;
            r.advance(JobState::Done);
        }
        Err(e) => {
            r.error = Some(e);
            r.advance(JobState::Failed);
        }
    });
}

fn write_mesh(shared: &Shared, id: &str, obj: &str) -> Result<Option<PathBuf>, JobError> {
    let Some(dir) = &shared.config.results else {
        return Ok(None);
    };
    let path = dir.join(format!("{id}.obj"));
    std::fs::write(&path, obj).map_err(|e| JobError {
        kind: "io".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(Some(path))
}

fn error_kind(e: &sdfgen_core::Error) -> &'static str {
    use sdfgen_core::Error::*;
    match e {
        InvalidArgument(_) => "invalid_argument",
        Diverged { .. } | NonFinite { .. } => "numerical",
        Io { .. } | Format { .. } | Json(_) => "io",
        _ => "internal",
    }
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Response {
    let request: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let shared = &state.shared;
    let conditions = match shared.catalog.resolve_all(&request.conditions) {
        Ok(c) => c,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if let Err(e) = shared.stack.check_request(&conditions, request.steps) {
        return error_response(StatusCode::BAD_REQUEST, e.to_string());
    }
    let id = format!("job-{:06}", shared.next_id.fetch_add(1, Ordering::Relaxed));
    let job = Job {
        id: id.clone(),
        conditions,
        seed: request.seed,
        steps: request.steps,
    };
    // Holding the write lock across the enqueue keeps a worker from seeing
    // a job before its record exists.
    let mut jobs = shared.jobs.write().unwrap_or_else(|e| e.into_inner());
    jobs.insert(id.clone(), JobRecord::new(id.clone(), request));
    match state.queue.try_send(job) {
        Ok(()) => (StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response(),
        Err(TrySendError::Full(_)) => {
            jobs.remove(&id);
            drop(jobs);
            let retry = shared.retry_after_seconds();
            (
                StatusCode::TOO_MANY_REQUESTS,
                [(header::RETRY_AFTER, retry.to_string())],
                Json(json!({ "error": "job queue is full", "retry_after_seconds": retry })),
            )
                .into_response()
        }
        Err(TrySendError::Disconnected(_)) => {
            jobs.remove(&id);
            error_response(StatusCode::SERVICE_UNAVAILABLE, "service is shutting down")
        }
    }
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let view = {
        let jobs = state.shared.jobs.read().unwrap_or_else(|e| e.into_inner());
        jobs.get(&id).map(JobRecord::view)
    };
    match view {
        Some(v) => Json(v).into_response(),
        None => error_response(StatusCode::NOT_FOUND, format!("unknown job `{id}`")),
    }
}

async fn catalog(State(state): State<AppState>) -> Json<CatalogView> {
    Json(state.shared.catalog_view.clone())
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

/// Bind `port` and serve until Ctrl-C.
pub async fn serve(router: Router, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
        .await
        .map_err(|e| std::io::Error::new(e.kind(), format!("cannot bind port {port}: {e}")))?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
