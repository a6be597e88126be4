//! The staged selection dataflow.
//!
//! A round moves every sample of the working set through four stages:
//! fetch (payload bytes via the [`DataManager`]), preprocess (bytes to
//! features), infer (batched model calls) and select (one strategy call over
//! the assembled matrices). [`PipelineMode::Pipelined`] runs the stages
//! concurrently over bounded queues; the two sequential modes finish each
//! stage before starting the next and exist as benchmark baselines.
//!
//! Selection never depends on the schedule: rows are re-sequenced by
//! [`SampleId`] before the strategy runs.

mod exec;
mod metrics;
mod preprocess;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CachePolicy, DataError, DataManager};
use crate::inference::{backend_from_spec, BackendSpec, BatchPolicy, InferenceBackend, InferenceError};
use crate::model::{ALQuery, ALReport, DatasetManifest, QueryError, SampleId, Stage};
use crate::strategy::StrategyError;

pub use metrics::{compute_metrics, read_trace, write_trace, StageEvent};
pub use preprocess::{
    preprocess, Transform, TransformError, TransformRegistry, DEFAULT_TRANSFORM, HISTOGRAM_BINS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Pipelined,
    /// Each round downloads, processes and infers its own working set, one
    /// stage at a time.
    SequentialRounds,
    /// Downloads the whole dataset, then processes all of it, then infers all.
    SequentialWhole,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 3] = [
        PipelineMode::Pipelined,
        PipelineMode::SequentialRounds,
        PipelineMode::SequentialWhole,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PipelineMode::Pipelined => "pipelined",
            PipelineMode::SequentialRounds => "sequential_rounds",
            PipelineMode::SequentialWhole => "sequential_whole",
        }
    }
}

impl std::fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        PipelineMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown pipeline mode {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// The first failing sample fails the run.
    #[default]
    Abort,
    /// Failing samples are dropped from the pool and listed in the report.
    Skip,
}

/// Fixed delays injected into each stage, for benchmarking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticLatency {
    #[serde(with = "crate::inference::millis_f64", default)]
    pub fetch: Duration,
    #[serde(with = "crate::inference::millis_f64", default)]
    pub preprocess: Duration,
    #[serde(with = "crate::inference::millis_f64", default)]
    pub infer_per_item: Duration,
    #[serde(with = "crate::inference::millis_f64", default)]
    pub infer_per_call: Duration,
}

impl SyntheticLatency {
    pub fn uniform_ms(ms: f64) -> Self {
        let d = Duration::from_secs_f64(ms / 1000.0);
        Self {
            fetch: d,
            preprocess: d,
            infer_per_item: d,
            infer_per_call: Duration::ZERO,
        }
    }
}

/// Scheduling parameters of one pipeline instance.
///
/// The query's `batch_size` caps inference batches; `batch.max_wait` bounds
/// how long a partial batch waits for more rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub mode: PipelineMode,
    pub queue_capacity: usize,
    pub fetch_workers: usize,
    pub preprocess_workers: usize,
    pub infer_workers: usize,
    pub batch: BatchPolicy,
    pub failure_policy: FailurePolicy,
    pub cache: CachePolicy,
    pub transform: String,
    pub latency: SyntheticLatency,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        let batch = BatchPolicy::default();
        Self {
            mode: PipelineMode::Pipelined,
            queue_capacity: 4 * batch.max_batch,
            fetch_workers: 4,
            preprocess_workers: 2,
            infer_workers: 1,
            batch,
            failure_policy: FailurePolicy::Abort,
            cache: CachePolicy::Cache,
            transform: DEFAULT_TRANSFORM.to_string(),
            latency: SyntheticLatency::default(),
        }
    }
}

impl PipelineSpec {
    pub fn with_mode(mode: PipelineMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidSpec(m.to_string()));
        if self.queue_capacity < 1 {
            return bad("queue_capacity must be >= 1");
        }
        if self.fetch_workers < 1 || self.preprocess_workers < 1 || self.infer_workers < 1 {
            return bad("worker counts must be >= 1");
        }
        if self.batch.max_batch < 1 {
            return bad("batch.max_batch must be >= 1");
        }
        Ok(())
    }

    /// Worker count per stage as scheduled in this spec's mode.
    pub fn workers(&self) -> BTreeMap<Stage, usize> {
        match self.mode {
            PipelineMode::Pipelined => BTreeMap::from([
                (Stage::Fetch, self.fetch_workers),
                (Stage::Preprocess, self.preprocess_workers),
                (Stage::Infer, self.infer_workers),
                (Stage::Select, 1),
            ]),
            _ => Stage::ALL.into_iter().map(|s| (s, 1)).collect(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline spec: {0}")]
    InvalidSpec(String),
    #[error("unknown transform {0:?}")]
    UnknownTransform(String),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("preprocessing sample {id} failed: {source}")]
    Preprocess {
        id: SampleId,
        #[source]
        source: TransformError,
    },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("cancelled")]
    Cancelled,
}

/// Cooperative cancellation flag shared between a run and its controller.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub report: ALReport,
    pub events: Vec<StageEvent>,
}

/// One pipeline instance: a data manager, a backend and a schedule.
///
/// Runs are independent; concurrent runs should use separate instances so
/// that cancellation tokens are not shared.
pub struct Pipeline {
    data: Arc<DataManager>,
    backend: Arc<dyn InferenceBackend>,
    spec: PipelineSpec,
    transforms: TransformRegistry,
    cancel: CancelToken,
}

impl Pipeline {
    pub fn new(
        data: Arc<DataManager>,
        backend: Arc<dyn InferenceBackend>,
        spec: PipelineSpec,
    ) -> Result<Self, PipelineError> {
        spec.validate()?;
        Ok(Self {
            data,
            backend,
            spec,
            transforms: TransformRegistry::default(),
            cancel: CancelToken::new(),
        })
    }

    pub fn with_transforms(mut self, transforms: TransformRegistry) -> Self {
        self.transforms = transforms;
        self
    }

    pub fn with_cancel_token(mut self, token: CancelToken) -> Self {
        self.cancel = token;
        self
    }

    pub fn spec(&self) -> &PipelineSpec {
        &self.spec
    }

    pub fn backend(&self) -> &Arc<dyn InferenceBackend> {
        &self.backend
    }

    pub fn data(&self) -> &Arc<DataManager> {
        &self.data
    }

    pub fn cancel_token(&self) -> CancelToken {
        self.cancel.clone()
    }

    /// Runs one selection round over `manifest` in this instance's mode.
    pub fn run_round(
        &self,
        manifest: &DatasetManifest,
        query: &ALQuery,
    ) -> Result<RoundOutput, PipelineError> {
        query.validate(manifest)?;
        let transform = self
            .transforms
            .get(&self.spec.transform)
            .ok_or_else(|| PipelineError::UnknownTransform(self.spec.transform.clone()))?;
        exec::run(self, manifest, query, transform)
    }

    /// Runs `rounds` rounds, adding each round's selection to the labeled set
    /// of the next.
    pub fn run_rounds(
        &self,
        manifest: &DatasetManifest,
        query: &ALQuery,
        rounds: usize,
    ) -> Result<Vec<RoundOutput>, PipelineError> {
        let mut query = query.clone();
        let mut out = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let round = self.run_round(manifest, &query)?;
            query.labeled_ids.extend(round.report.selected_ids());
            out.push(round);
        }
        Ok(out)
    }
}

/// Builds a pipeline for `backend` and runs one round.
pub fn run_round(
    data: Arc<DataManager>,
    manifest: &DatasetManifest,
    query: &ALQuery,
    spec: PipelineSpec,
    backend: &BackendSpec,
) -> Result<RoundOutput, PipelineError> {
    Pipeline::new(data, backend_from_spec(backend)?, spec)?.run_round(manifest, query)
}

/// [`run_round`] restricted to the two sequential baseline modes.
pub fn run_baseline_dataflow(
    mode: PipelineMode,
    data: Arc<DataManager>,
    manifest: &DatasetManifest,
    query: &ALQuery,
    spec: PipelineSpec,
    backend: &BackendSpec,
) -> Result<RoundOutput, PipelineError> {
    if mode == PipelineMode::Pipelined {
        return Err(PipelineError::InvalidSpec(
            "baseline dataflow must be sequential_rounds or sequential_whole".into(),
        ));
    }
    run_round(data, manifest, query, PipelineSpec { mode, ..spec }, backend)
}
