//! Blocking client SDK for the service.
//!
//! ```no_run
//! use alaas_service::client::{Client, ClientConfig};
//! use alaas_core::model::StrategyKind;
//!
//! let client = Client::new(ClientConfig::new("http://127.0.0.1:8081")).unwrap();
//! let dataset = client.push_dir("./images", "pool").unwrap();
//! let report = client.query_and_wait(dataset, StrategyKind::LC, 10, 0).unwrap();
//! for s in &report.selected {
//!     println!("{} {}", s.uri, s.score);
//! }
//! ```

use std::path::Path;
use std::time::{Duration, Instant};

use alaas_core::model::{ALReport, DatasetId, DatasetManifest, JobId, StrategyKind};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use url::Url;

use crate::api::{DatasetCreated, DatasetRequest, ErrorBody, Health, QueryAccepted, QueryRequest};
use crate::jobs::{JobRecord, JobState};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientConfig {
    pub server_url: String,
    pub request_timeout_ms: u64,
    pub poll_interval_ms: u64,
    pub max_poll_time_ms: u64,
}

impl ClientConfig {
    pub fn new(server_url: impl Into<String>) -> Self {
        Self {
            server_url: server_url.into(),
            request_timeout_ms: 30_000,
            poll_interval_ms: 100,
            max_poll_time_ms: 600_000,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let url = Url::parse(&self.server_url)
            .map_err(|e| ClientError::InvalidRequest(format!("server url {:?}: {e}", self.server_url)))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(ClientError::InvalidRequest("server url must be http(s)".into()));
        }
        if self.request_timeout_ms == 0 || self.poll_interval_ms == 0 {
            return Err(ClientError::InvalidRequest("timeouts must be positive".into()));
        }
        if self.poll_interval_ms > self.max_poll_time_ms {
            return Err(ClientError::InvalidRequest(
                "poll_interval_ms must not exceed max_poll_time_ms".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("server unreachable: {0}")]
    ServerUnreachable(String),
    #[error("server error {status} {code}: {message}")]
    ServerError { status: u16, code: String, message: String },
    #[error("job failed: {message}")]
    JobFailed { message: String },
    #[error("job was cancelled")]
    JobCancelled,
    #[error("gave up waiting for job {0}")]
    PollTimeout(JobId),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct Client {
    cfg: ClientConfig,
    base: String,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(cfg: ClientConfig) -> Result<Self, ClientError> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.request_timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            base: cfg.server_url.trim_end_matches('/').to_string(),
            cfg,
            agent,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    fn decode<T: DeserializeOwned>(
        &self,
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, ClientError> {
        let mut resp = result.map_err(|e| ClientError::ServerUnreachable(format!("{}: {e}", self.base)))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_string()
            .map_err(|e| ClientError::ServerUnreachable(e.to_string()))?;
        if (200..300).contains(&status) {
            return serde_json::from_str(&body).map_err(|e| ClientError::ServerError {
                status,
                code: "MalformedResponse".into(),
                message: e.to_string(),
            });
        }
        let err: ErrorBody = serde_json::from_str(&body).unwrap_or_else(|_| ErrorBody {
            code: "Unknown".into(),
            message: body,
        });
        Err(ClientError::ServerError {
            status,
            code: err.code,
            message: err.message,
        })
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.decode(self.agent.get(&format!("{}{path}", self.base)).call())
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        self.decode(self.agent.post(&format!("{}{path}", self.base)).send_json(body))
    }

    pub fn health(&self) -> Result<Health, ClientError> {
        self.get("/v1/health")
    }

    pub fn push_uris<S: AsRef<str>>(&self, uris: &[S], name: &str) -> Result<DatasetId, ClientError> {
        let req = DatasetRequest {
            uris: uris.iter().map(|u| u.as_ref().to_string()).collect(),
            name: name.to_string(),
            owner: None,
        };
        let created: DatasetCreated = self.post("/v1/datasets", &req)?;
        Ok(created.dataset_id)
    }

    /// Pushes every regular file in `dir` (not recursive), sorted by name.
    pub fn push_dir(&self, dir: impl AsRef<Path>, name: &str) -> Result<DatasetId, ClientError> {
        self.push_uris(&dir_uris(dir)?, name)
    }

    pub fn dataset(&self, id: DatasetId) -> Result<DatasetManifest, ClientError> {
        self.get(&format!("/v1/datasets/{id}"))
    }

    pub fn submit(&self, req: &QueryRequest) -> Result<JobId, ClientError> {
        if req.budget == Some(0) {
            return Err(ClientError::InvalidRequest("budget must be positive".into()));
        }
        if req.batch_size == Some(0) {
            return Err(ClientError::InvalidRequest("batch size must be positive".into()));
        }
        let accepted: QueryAccepted = self.post("/v1/queries", req)?;
        Ok(accepted.job_id)
    }

    pub fn job(&self, id: JobId) -> Result<JobRecord, ClientError> {
        self.get(&format!("/v1/queries/{id}"))
    }

    pub fn cancel(&self, id: JobId) -> Result<JobRecord, ClientError> {
        self.decode(self.agent.delete(&format!("{}/v1/queries/{id}", self.base)).call())
    }

    /// Polls until the job ends or `max_poll_time_ms` passes.
    pub fn wait(&self, id: JobId) -> Result<ALReport, ClientError> {
        let deadline = Instant::now() + Duration::from_millis(self.cfg.max_poll_time_ms);
        loop {
            let rec = self.job(id)?;
            match rec.state {
                JobState::Done => {
                    return rec.report.ok_or_else(|| ClientError::ServerError {
                        status: 200,
                        code: "MalformedResponse".into(),
                        message: "done job without a report".into(),
                    })
                }
                JobState::Failed => {
                    return Err(ClientError::JobFailed {
                        message: rec.error.unwrap_or_default(),
                    })
                }
                JobState::Cancelled => return Err(ClientError::JobCancelled),
                JobState::Queued | JobState::Running => {}
            }
            if Instant::now() >= deadline {
                return Err(ClientError::PollTimeout(id));
            }
            std::thread::sleep(Duration::from_millis(self.cfg.poll_interval_ms));
        }
    }

    pub fn query_and_wait_with(&self, req: &QueryRequest) -> Result<ALReport, ClientError> {
        let id = self.submit(req)?;
        self.wait(id)
    }

    pub fn query_and_wait(
        &self,
        dataset: DatasetId,
        strategy: StrategyKind,
        budget: usize,
        seed: u64,
    ) -> Result<ALReport, ClientError> {
        let mut req = QueryRequest::new(dataset);
        req.strategy = Some(strategy);
        req.budget = Some(budget);
        req.seed = Some(seed);
        self.query_and_wait_with(&req)
    }
}

/// `file://` URIs for the regular files directly under `dir`, sorted.
pub fn dir_uris(dir: impl AsRef<Path>) -> Result<Vec<String>, ClientError> {
    let dir = dir.as_ref().canonicalize()?;
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            paths.push(entry.path());
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            Url::from_file_path(p)
                .map(String::from)
                .map_err(|_| ClientError::InvalidRequest(format!("not a file path: {}", p.display())))
        })
        .collect()
}
