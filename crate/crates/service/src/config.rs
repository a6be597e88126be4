//! Service configuration loaded from YAML.
//!
//! Every key is checked: unknown keys are rejected rather than ignored, and
//! values are validated before the service starts. Only
//! `active_learning.strategy` and `active_learning.budget` are required.
//!
//! ```yaml
//! name: demo
//! active_learning:
//!   strategy: LeastConfidence
//!   budget: 100
//! infer:
//!   backend: remote
//!   endpoint: http://127.0.0.1:8090
//! ```
//!
//! | key | default |
//! |---|---|
//! | `name` | `alaas` |
//! | `version` | package version |
//! | `active_learning.batch_size` | 16 |
//! | `active_learning.dbal_beta` | 10 (DBAL only) |
//! | `active_learning.seed` | 0 |
//! | `server.host` / `port` / `workers` | `127.0.0.1` / 8081 / 2 |
//! | `infer.backend` | `mock` |
//! | `infer.endpoint` | none (required for `remote`) |
//! | `infer.model_version` | `mock-v1` |
//! | `infer.classes` / `embed_dim` | 10 / 16 |
//! | `infer.batch_limit` | 256 |
//! | `infer.timeout_ms` | 30000 |
//! | `infer.workers` | 1 |
//! | `infer.max_wait_ms` | 10 |
//! | `data.data_dir` | `alaas-data` |
//! | `data.cache_dir` | `<data_dir>/cache` |
//! | `data.cache_max_bytes` | 1073741824 |
//! | `data.fetch_concurrency` | 8 |
//! | `data.fetch_timeout_ms` | 30000 |
//! | `data.s3_gateway_template` | none |
//! | `pipeline.mode` | `pipelined` |
//! | `pipeline.queue_capacity` | 4 x batch_size |
//! | `pipeline.preprocess_workers` | 2 |
//! | `pipeline.failure_policy` | `abort` |
//! | `pipeline.transform` | `histogram` |
//! | `pipeline.synthetic_latency` | all zero (ms) |
//!
//! Relative directories are resolved against the config file's directory.

use std::path::{Path, PathBuf};
use std::time::Duration;

use alaas_core::data::FetchConfig;
use alaas_core::inference::{BackendKind, BackendSpec, BatchPolicy};
use alaas_core::model::{StrategyKind, DEFAULT_DBAL_BETA};
use alaas_core::pipeline::{FailurePolicy, PipelineMode, PipelineSpec, SyntheticLatency};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("YAML syntax error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("unknown key {key:?} under {parent:?}")]
    UnknownKey { key: String, parent: String },
    #[error("invalid value for {key}: {reason}")]
    InvalidValue { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    version: Option<String>,
    active_learning: RawActiveLearning,
    #[serde(default)]
    server: RawServer,
    #[serde(default)]
    infer: RawInfer,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    pipeline: RawPipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawActiveLearning {
    strategy: String,
    budget: usize,
    batch_size: Option<usize>,
    dbal_beta: Option<u32>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawServer {
    host: Option<String>,
    port: Option<u16>,
    workers: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInfer {
    backend: Option<BackendKind>,
    endpoint: Option<String>,
    model_version: Option<String>,
    classes: Option<usize>,
    embed_dim: Option<usize>,
    batch_limit: Option<usize>,
    timeout_ms: Option<u64>,
    workers: Option<usize>,
    max_wait_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    data_dir: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    cache_max_bytes: Option<u64>,
    fetch_concurrency: Option<usize>,
    fetch_timeout_ms: Option<u64>,
    s3_gateway_template: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPipeline {
    mode: Option<PipelineMode>,
    queue_capacity: Option<usize>,
    preprocess_workers: Option<usize>,
    failure_policy: Option<FailurePolicy>,
    transform: Option<String>,
    synthetic_latency: Option<RawLatency>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLatency {
    fetch_ms: Option<f64>,
    preprocess_ms: Option<f64>,
    infer_per_item_ms: Option<f64>,
    infer_per_call_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveLearningConfig {
    pub strategy: StrategyKind,
    pub budget: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub cache_max_bytes: u64,
    pub fetch_concurrency: usize,
    pub fetch_timeout_ms: u64,
    pub s3_gateway_template: Option<String>,
}

impl DataConfig {
    pub fn fetch_config(&self) -> FetchConfig {
        FetchConfig {
            timeout: Duration::from_millis(self.fetch_timeout_ms),
            s3_gateway_template: self.s3_gateway_template.clone(),
            ..FetchConfig::default()
        }
    }
}

/// A fully validated configuration with every default applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceConfig {
    pub name: String,
    pub version: String,
    pub active_learning: ActiveLearningConfig,
    pub server: ServerConfig,
    pub infer: BackendSpec,
    pub data: DataConfig,
    pub pipeline: PipelineSpec,
}

impl ServiceConfig {
    /// Parses YAML text; relative paths resolve against `base_dir`.
    pub fn from_yaml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let value: serde_yaml::Value = serde_yaml::from_str(text).map_err(|e| ConfigError::ParseError {
            line: e.location().map(|l| l.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        if value.is_null() {
            return Err(invalid("active_learning", "missing field"));
        }
        let raw: RawConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().to_string();
            match unknown_field(&message) {
                Some(key) => {
                    // The reported path ends with the offending key itself.
                    let parent = path
                        .strip_suffix(key.as_str())
                        .unwrap_or(&path)
                        .trim_end_matches('.')
                        .to_string();
                    ConfigError::UnknownKey { key, parent }
                }
                None => invalid(&path, message),
            }
        })?;
        build(raw, base_dir)
    }

    /// Applies `ALAAS_HOST` / `ALAAS_PORT` overrides.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(host) = std::env::var("ALAAS_HOST") {
            self.server.host = host;
        }
        if let Ok(port) = std::env::var("ALAAS_PORT") {
            self.server.port = port
                .parse()
                .map_err(|_| invalid("ALAAS_PORT", format!("{port:?} is not a port number")))?;
        }
        Ok(())
    }

    /// A mock-backend config rooted at `data_dir`, mainly for tests.
    pub fn for_data_dir(data_dir: impl Into<PathBuf>) -> Self {
        let data_dir = data_dir.into();
        let text = format!(
            "active_learning: {{strategy: LC, budget: 10}}\nserver: {{port: 0}}\ndata: {{data_dir: {:?}}}\n",
            data_dir
        );
        Self::from_yaml(&text, Path::new("/")).expect("built-in config is valid")
    }
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

/// Reads and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ServiceConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    ServiceConfig::from_yaml(&text, base)
}

fn positive(key: &str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        Err(invalid(key, "must be positive"))
    } else {
        Ok(v)
    }
}

fn ms(key: &str, v: Option<f64>) -> Result<Duration, ConfigError> {
    let v = v.unwrap_or(0.0);
    if !v.is_finite() || v < 0.0 {
        return Err(invalid(key, "must be a non-negative number of milliseconds"));
    }
    Ok(Duration::from_secs_f64(v / 1000.0))
}

fn build(raw: RawConfig, base: &Path) -> Result<ServiceConfig, ConfigError> {
    let al = raw.active_learning;
    let mut strategy = StrategyKind::from_alias(&al.strategy).ok_or_else(|| {
        invalid(
            "active_learning.strategy",
            format!(
                "unknown strategy {:?}; expected one of {}",
                al.strategy,
                StrategyKind::alias_list()
            ),
        )
    })?;
    match (strategy, al.dbal_beta) {
        (_, Some(0)) => return Err(invalid("active_learning.dbal_beta", "must be positive")),
        (StrategyKind::DBAL { .. }, beta) => {
            strategy = StrategyKind::DBAL {
                beta: beta.unwrap_or(DEFAULT_DBAL_BETA),
            }
        }
        (_, Some(_)) => {
            return Err(invalid("active_learning.dbal_beta", "only valid with the DBAL strategy"))
        }
        _ => {}
    }
    let batch_size = positive("active_learning.batch_size", al.batch_size.unwrap_or(16))?;
    let active_learning = ActiveLearningConfig {
        strategy,
        budget: positive("active_learning.budget", al.budget)?,
        batch_size,
        seed: al.seed.unwrap_or(0),
    };

    let server = ServerConfig {
        host: raw.server.host.unwrap_or_else(|| "127.0.0.1".into()),
        port: raw.server.port.unwrap_or(8081),
        workers: positive("server.workers", raw.server.workers.unwrap_or(2))?,
    };
    if server.host.trim().is_empty() {
        return Err(invalid("server.host", "must not be empty"));
    }

    let inf = raw.infer;
    let kind = inf.backend.unwrap_or(BackendKind::Mock);
    if let Some(ep) = &inf.endpoint {
        let parsed = url::Url::parse(ep).map_err(|e| invalid("infer.endpoint", e.to_string()))?;
        if !matches!(parsed.scheme(), "http" | "https") {
            return Err(invalid("infer.endpoint", "must be an http(s) URL"));
        }
    }
    if kind == BackendKind::Remote && inf.endpoint.is_none() {
        return Err(invalid("infer.endpoint", "required when infer.backend is remote"));
    }
    let classes = inf.classes.unwrap_or(10);
    if classes < 2 {
        return Err(invalid("infer.classes", "must be at least 2"));
    }
    let model_version = inf.model_version.unwrap_or_else(|| "mock-v1".into());
    if model_version.is_empty() {
        return Err(invalid("infer.model_version", "must not be empty"));
    }
    let infer = BackendSpec {
        kind,
        model_version,
        classes,
        embed_dim: positive("infer.embed_dim", inf.embed_dim.unwrap_or(16))?,
        endpoint: inf.endpoint,
        batch_limit: positive("infer.batch_limit", inf.batch_limit.unwrap_or(256))?,
        timeout_ms: positive("infer.timeout_ms", inf.timeout_ms.unwrap_or(30_000) as usize)? as u64,
    };

    let d = raw.data;
    let data_dir = base.join(d.data_dir.unwrap_or_else(|| "alaas-data".into()));
    let cache_dir = d
        .cache_dir
        .map(|c| base.join(c))
        .unwrap_or_else(|| data_dir.join("cache"));
    let cache_max_bytes = d.cache_max_bytes.unwrap_or(1 << 30);
    if cache_max_bytes == 0 {
        return Err(invalid("data.cache_max_bytes", "must be positive"));
    }
    if let Some(t) = &d.s3_gateway_template {
        if !t.contains("{key}") {
            return Err(invalid("data.s3_gateway_template", "must contain {key}"));
        }
    }
    let data = DataConfig {
        data_dir,
        cache_dir,
        cache_max_bytes,
        fetch_concurrency: positive("data.fetch_concurrency", d.fetch_concurrency.unwrap_or(8))?,
        fetch_timeout_ms: positive("data.fetch_timeout_ms", d.fetch_timeout_ms.unwrap_or(30_000) as usize)?
            as u64,
        s3_gateway_template: d.s3_gateway_template,
    };

    let p = raw.pipeline;
    let lat = p.synthetic_latency.unwrap_or_default();
    let pipeline = PipelineSpec {
        mode: p.mode.unwrap_or(PipelineMode::Pipelined),
        queue_capacity: positive("pipeline.queue_capacity", p.queue_capacity.unwrap_or(4 * batch_size))?,
        fetch_workers: data.fetch_concurrency,
        preprocess_workers: positive("pipeline.preprocess_workers", p.preprocess_workers.unwrap_or(2))?,
        infer_workers: positive("infer.workers", inf.workers.unwrap_or(1))?,
        batch: BatchPolicy::new(batch_size, Duration::from_millis(inf.max_wait_ms.unwrap_or(10))),
        failure_policy: p.failure_policy.unwrap_or_default(),
        cache: Default::default(),
        transform: p.transform.unwrap_or_else(|| alaas_core::pipeline::DEFAULT_TRANSFORM.into()),
        latency: SyntheticLatency {
            fetch: ms("pipeline.synthetic_latency.fetch_ms", lat.fetch_ms)?,
            preprocess: ms("pipeline.synthetic_latency.preprocess_ms", lat.preprocess_ms)?,
            infer_per_item: ms("pipeline.synthetic_latency.infer_per_item_ms", lat.infer_per_item_ms)?,
            infer_per_call: ms("pipeline.synthetic_latency.infer_per_call_ms", lat.infer_per_call_ms)?,
        },
    };
    if alaas_core::pipeline::TransformRegistry::default()
        .get(&pipeline.transform)
        .is_none()
    {
        return Err(invalid("pipeline.transform", format!("unknown transform {:?}", pipeline.transform)));
    }

    Ok(ServiceConfig {
        name: raw.name.unwrap_or_else(|| "alaas".into()),
        version: raw.version.unwrap_or_else(|| env!("CARGO_PKG_VERSION").into()),
        active_learning,
        server,
        infer,
        data,
        pipeline,
    })
}
