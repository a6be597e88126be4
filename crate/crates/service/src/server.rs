//! The HTTP service: dataset ingestion plus asynchronous query jobs.
//!
//! | method | path | success |
//! |---|---|---|
//! | GET | `/v1/health` | 200 [`Health`] |
//! | POST | `/v1/datasets` | 201 [`DatasetCreated`] |
//! | GET | `/v1/datasets/{id}` | 200 manifest |
//! | POST | `/v1/queries` | 202 [`QueryAccepted`] |
//! | GET | `/v1/queries/{job_id}` | 200 [`JobRecord`] |
//! | DELETE | `/v1/queries/{job_id}` | 200 [`JobRecord`] |
//!
//! Errors are `{"code", "message"}` with a 4xx/5xx status. Jobs run on
//! `server.workers` plain threads, each with its own pipeline and backend.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::panic::AssertUnwindSafe;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use alaas_core::data::{DataError, DataManager};
use alaas_core::inference::backend_from_spec;
use alaas_core::model::{ALQuery, ALReport, DatasetId, JobId, QueryError};
use alaas_core::pipeline::{CancelToken, Pipeline, PipelineError};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;
use thiserror::Error;

use crate::api::{DatasetCreated, DatasetRequest, ErrorBody, Health, QueryAccepted, QueryRequest};
use crate::config::ServiceConfig;
use crate::jobs::{JobError, JobState, JobStore};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {message}")]
    BindFailed { addr: String, message: String },
    #[error("cannot open data directory: {0}")]
    Data(#[from] DataError),
    #[error("cannot open job store: {0}")]
    Jobs(#[from] JobError),
    #[error("runtime: {0}")]
    Runtime(#[from] std::io::Error),
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "InvalidRequest", r.body_text())
    }
}

impl From<DataError> for ApiError {
    fn from(e: DataError) -> Self {
        let (status, code) = match &e {
            DataError::DuplicateUri { .. } => (StatusCode::CONFLICT, "DuplicateUri"),
            DataError::UnsupportedScheme(_) => (StatusCode::BAD_REQUEST, "UnsupportedScheme"),
            DataError::EmptyDataset => (StatusCode::BAD_REQUEST, "EmptyDataset"),
            DataError::UnknownDataset(_) => (StatusCode::NOT_FOUND, "UnknownDataset"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "StorageError"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        let code = serde_json::to_value(&e)
            .ok()
            .and_then(|v| v.get("code").and_then(|c| c.as_str()).map(str::to_string))
            .unwrap_or_else(|| "InvalidQuery".into());
        ApiError::new(StatusCode::BAD_REQUEST, &code, e.to_string())
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        match e {
            JobError::UnknownJob(_) => ApiError::new(StatusCode::NOT_FOUND, "UnknownJob", e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "StorageError", e.to_string()),
        }
    }
}

struct App {
    config: ServiceConfig,
    data: Arc<DataManager>,
    jobs: JobStore,
    queue: Mutex<Option<Sender<JobId>>>,
    running: Mutex<HashMap<JobId, CancelToken>>,
    stopping: AtomicBool,
    backend_calls: AtomicU64,
}

impl App {
    fn enqueue(&self, id: JobId) -> bool {
        match &*self.queue.lock() {
            Some(tx) => tx.send(id).is_ok(),
            None => false,
        }
    }

    fn worker(&self, rx: Receiver<JobId>) {
        for id in rx.iter() {
            if !self.stopping.load(Ordering::SeqCst) {
                self.run_job(id);
            }
        }
    }

    fn run_job(&self, id: JobId) {
        let Some(rec) = self.jobs.get(id) else { return };
        if rec.state != JobState::Queued {
            return;
        }
        let token = CancelToken::new();
        // Registered before the job turns running, so a cancel that sees
        // `running` always finds the token.
        self.running.lock().insert(id, token.clone());
        if self.jobs.start(id).is_err() {
            self.running.lock().remove(&id);
            return;
        }
        let result = std::panic::catch_unwind(AssertUnwindSafe(|| self.execute(id, &rec.query, token)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "worker panicked".into());
                Err(PipelineError::InvalidSpec(format!("internal error: {msg}")))
            });
        self.running.lock().remove(&id);
        let outcome = match result {
            Ok(report) => self.jobs.finish(id, report),
            Err(PipelineError::Cancelled) => self.jobs.mark_cancelled(id),
            Err(e) => self.jobs.fail(id, e.to_string()),
        };
        if let Err(e) = outcome {
            log::error!("cannot record outcome of job {id}: {e}");
        }
        match self.data.evict(self.config.data.cache_max_bytes) {
            Ok(0) => {}
            Ok(n) => log::info!("evicted {n} cached payloads"),
            Err(e) => log::warn!("cache eviction failed: {e}"),
        }
    }

    fn execute(&self, id: JobId, query: &ALQuery, token: CancelToken) -> Result<ALReport, PipelineError> {
        let manifest = self
            .data
            .manifest(query.dataset_id)
            .ok_or(DataError::UnknownDataset(query.dataset_id))?;
        let backend = backend_from_spec(&self.config.infer)?;
        let pipeline = Pipeline::new(self.data.clone(), backend.clone(), self.config.pipeline.clone())?
            .with_cancel_token(token);
        let result = pipeline.run_round(&manifest, query);
        self.backend_calls.fetch_add(backend.calls(), Ordering::SeqCst);
        let mut report = result?.report;
        report.job_id = id;
        Ok(report)
    }

    fn query_from(&self, req: QueryRequest) -> Result<ALQuery, ApiError> {
        let al = &self.config.active_learning;
        let manifest = self
            .data
            .manifest(req.dataset_id)
            .ok_or(DataError::UnknownDataset(req.dataset_id))?;
        let query = ALQuery {
            dataset_id: req.dataset_id,
            strategy: req.strategy.unwrap_or(al.strategy),
            budget: req.budget.unwrap_or(al.budget),
            batch_size: req.batch_size.unwrap_or(al.batch_size),
            seed: req.seed.unwrap_or(al.seed),
            labeled_ids: req.labeled_ids,
        };
        query.validate(&manifest)?;
        Ok(query)
    }
}

type Shared = State<Arc<App>>;

async fn health(State(app): Shared) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        name: app.config.name.clone(),
        version: app.config.version.clone(),
    })
}

async fn create_dataset(
    State(app): Shared,
    body: Result<Json<DatasetRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<DatasetCreated>), ApiError> {
    let Json(req) = body?;
    let owner = req.owner.unwrap_or_default();
    let manifest = tokio::task::spawn_blocking(move || app.data.ingest(&req.uris, &req.name, &owner))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    Ok((
        StatusCode::CREATED,
        Json(DatasetCreated {
            dataset_id: manifest.dataset_id,
            size: manifest.len(),
        }),
    ))
}

fn unknown_dataset(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "UnknownDataset", format!("unknown dataset {id}"))
}

async fn get_dataset(State(app): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    let parsed: DatasetId = id.parse().map_err(|_| unknown_dataset(&id))?;
    let manifest = app.data.manifest(parsed).ok_or_else(|| unknown_dataset(&id))?;
    Ok(Json(manifest).into_response())
}

async fn submit_query(
    State(app): Shared,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<QueryAccepted>), ApiError> {
    let Json(req) = body?;
    if app.stopping.load(Ordering::SeqCst) {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "ShuttingDown", "server is shutting down"));
    }
    let query = app.query_from(req)?;
    let rec = tokio::task::spawn_blocking({
        let app = app.clone();
        move || app.jobs.submit(query)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    // A job that misses the queue stays queued on disk and is picked up
    // again on restart.
    app.enqueue(rec.job_id);
    Ok((
        StatusCode::ACCEPTED,
        Json(QueryAccepted {
            job_id: rec.job_id,
            state: rec.state,
        }),
    ))
}

fn parse_job(id: &str) -> Result<JobId, ApiError> {
    id.parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "UnknownJob", format!("unknown job {id}")))
}

async fn get_job(State(app): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = parse_job(&id)?;
    let rec = app.jobs.get(id).ok_or(JobError::UnknownJob(id))?;
    Ok(Json(&*rec).into_response())
}

async fn cancel_job(State(app): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = parse_job(&id)?;
    let rec = tokio::task::spawn_blocking({
        let app = app.clone();
        move || app.jobs.cancel(id)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    if rec.state == JobState::Running {
        if let Some(token) = app.running.lock().get(&id) {
            token.cancel();
        }
    }
    Ok(Json(&*rec).into_response())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "MethodNotAllowed", "method not allowed on this endpoint")
}

fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/datasets", axum::routing::post(create_dataset))
        .route("/v1/datasets/{id}", get(get_dataset))
        .route("/v1/queries", axum::routing::post(submit_query))
        .route("/v1/queries/{job_id}", get(get_job).delete(cancel_job))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(app)
}

/// A running service. Dropping it shuts the service down.
pub struct ServiceHandle {
    app: Arc<App>,
    addr: SocketAddr,
    runtime: Option<tokio::runtime::Runtime>,
    http: Option<tokio::task::JoinHandle<std::io::Result<()>>>,
    stop_http: Option<tokio::sync::oneshot::Sender<()>>,
    workers: Vec<JoinHandle<()>>,
}

/// Starts the service: opens storage, re-queues interrupted jobs, binds the
/// listener and starts the workers.
pub fn serve(config: ServiceConfig) -> Result<ServiceHandle, ServeError> {
    let addr = format!("{}:{}", config.server.host, config.server.port);
    let listener = std::net::TcpListener::bind(&addr).map_err(|e| ServeError::BindFailed {
        addr: addr.clone(),
        message: e.to_string(),
    })?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;

    let data = Arc::new(DataManager::open(
        &config.data.data_dir,
        &config.data.cache_dir,
        config.data.fetch_config(),
    )?);
    let (jobs, requeue) = JobStore::open(config.data.data_dir.join("jobs"))?;
    let (tx, rx) = crossbeam_channel::unbounded();
    for id in requeue {
        log::info!("re-queueing job {id}");
        tx.send(id).expect("receiver alive");
    }
    let workers_n = config.server.workers;
    let app = Arc::new(App {
        config,
        data,
        jobs,
        queue: Mutex::new(Some(tx)),
        running: Mutex::new(HashMap::new()),
        stopping: AtomicBool::new(false),
        backend_calls: AtomicU64::new(0),
    });
    let workers = (0..workers_n)
        .map(|i| {
            let app = app.clone();
            let rx = rx.clone();
            std::thread::Builder::new()
                .name(format!("alaas-job-{i}"))
                .spawn(move || app.worker(rx))
        })
        .collect::<std::io::Result<Vec<_>>>()?;

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .thread_name("alaas-http")
        .enable_all()
        .build()?;
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let router = router(app.clone());
    let http = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        Ok::<_, std::io::Error>(tokio::spawn(async move {
            axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = stop_rx.await;
                })
                .await
        }))
    })?;
    log::info!("listening on http://{local}");
    Ok(ServiceHandle {
        app,
        addr: local,
        runtime: Some(runtime),
        http: Some(http),
        stop_http: Some(stop_tx),
        workers,
    })
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.app.config
    }

    pub fn data(&self) -> &Arc<DataManager> {
        &self.app.data
    }

    pub fn jobs(&self) -> &JobStore {
        &self.app.jobs
    }

    /// Fetches that left the payload cache since start.
    pub fn remote_accesses(&self) -> u64 {
        self.app.data.remote_accesses()
    }

    /// Inference calls made by finished or interrupted jobs since start.
    pub fn backend_calls(&self) -> u64 {
        self.app.backend_calls.load(Ordering::SeqCst)
    }

    /// Blocks until SIGINT or SIGTERM, then shuts down.
    pub fn run_until_signal(mut self) {
        if let Some(rt) = &self.runtime {
            rt.block_on(async {
                let ctrl_c = tokio::signal::ctrl_c();
                #[cfg(unix)]
                {
                    let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
                        .expect("SIGTERM handler");
                    tokio::select! {
                        _ = ctrl_c => {}
                        _ = term.recv() => {}
                    }
                }
                #[cfg(not(unix))]
                let _ = ctrl_c.await;
            });
        }
        log::info!("shutting down");
        self.stop();
    }

    /// Stops accepting requests, cancels running jobs at their next batch
    /// boundary, waits for the workers and flushes storage. Queued jobs stay
    /// queued on disk for the next start.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let Some(rt) = self.runtime.take() else { return };
        if let Some(tx) = self.stop_http.take() {
            let _ = tx.send(());
        }
        if let Some(http) = self.http.take() {
            match rt.block_on(http) {
                Ok(Ok(())) => {}
                Ok(Err(e)) => log::warn!("http server: {e}"),
                Err(e) => log::warn!("http task: {e}"),
            }
        }
        self.app.stopping.store(true, Ordering::SeqCst);
        for token in self.app.running.lock().values() {
            token.cancel();
        }
        self.app.queue.lock().take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
        if let Err(e) = self.app.data.flush() {
            log::warn!("flush on shutdown failed: {e}");
        }
        rt.shutdown_background();
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
