//! Desk-scale efficiency benchmarks over the pipeline modes.
//!
//! A scenario fixes a synthetic pool, a query and injected stage latencies,
//! then measures every (mode, batch size) cell several times. Every run is
//! also checked against a direct strategy run on independently computed
//! matrices, so a cell can never report numbers for wrong selections.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CachePolicy, DataError, DataManager, FetchConfig, RemoteSource, UriFetcher};
use crate::inference::stub::{StubConfig, StubServer};
use crate::inference::{
    backend_from_spec, mock_model, BackendSpec, BatchPolicy, FeatureVector, InferenceError,
};
use crate::model::{
    ALQuery, DatasetManifest, EmbeddingMatrix, ProbabilityMatrix, SampleId, StrategyKind,
};
use crate::pipeline::{
    Pipeline, PipelineMode, PipelineSpec, SyntheticLatency, Transform, TransformRegistry,
    DEFAULT_TRANSFORM,
};
use crate::strategy::{run_strategy, StrategyError, StrategyInput};
use crate::synth;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchBackend {
    #[default]
    Mock,
    /// An in-process HTTP inference stub reached through the remote backend.
    RemoteStub { per_call_ms: f64, per_item_ms: f64 },
}

fn default_classes() -> usize {
    10
}

fn default_embed_dim() -> usize {
    16
}

fn default_max_wait_ms() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchScenario {
    pub pool_size: usize,
    pub budget: usize,
    pub strategy: StrategyKind,
    pub modes: Vec<PipelineMode>,
    pub batch_sizes: Vec<usize>,
    #[serde(default)]
    pub fetch_latency_ms: f64,
    #[serde(default)]
    pub preprocess_latency_ms: f64,
    #[serde(default)]
    pub infer_latency_ms_per_item: f64,
    #[serde(default)]
    pub infer_latency_ms_per_call: f64,
    pub repeats: usize,
    #[serde(default)]
    pub backend: BenchBackend,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_max_wait_ms")]
    pub max_wait_ms: u64,
}

impl BenchScenario {
    /// The pipelined-vs-sequential comparison with equal 1 ms stage latencies.
    pub fn stage_latency(pool_size: usize, batch_size: usize, repeats: usize) -> Self {
        Self {
            pool_size,
            budget: 10,
            strategy: StrategyKind::LC,
            modes: vec![PipelineMode::Pipelined, PipelineMode::SequentialWhole],
            batch_sizes: vec![batch_size],
            fetch_latency_ms: 1.0,
            preprocess_latency_ms: 1.0,
            infer_latency_ms_per_item: 1.0,
            infer_latency_ms_per_call: 0.0,
            repeats,
            backend: BenchBackend::Mock,
            seed: 0,
            classes: default_classes(),
            embed_dim: default_embed_dim(),
            max_wait_ms: default_max_wait_ms(),
        }
    }

    /// Throughput over inference batch sizes against a remote stub with a
    /// fixed per-call overhead.
    pub fn batch_sweep(pool_size: usize, batch_sizes: Vec<usize>, repeats: usize) -> Self {
        Self {
            modes: vec![PipelineMode::Pipelined],
            batch_sizes,
            fetch_latency_ms: 0.0,
            preprocess_latency_ms: 0.0,
            infer_latency_ms_per_item: 0.0,
            backend: BenchBackend::RemoteStub {
                per_call_ms: 5.0,
                per_item_ms: 0.2,
            },
            ..Self::stage_latency(pool_size, 1, repeats)
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidScenario(m.to_string()));
        if self.pool_size == 0 {
            return bad("pool_size must be positive");
        }
        if self.budget == 0 || self.budget > self.pool_size {
            return bad("budget must be in 1..=pool_size");
        }
        if self.modes.is_empty() || self.batch_sizes.is_empty() {
            return bad("modes and batch_sizes must be non-empty");
        }
        if self.batch_sizes.contains(&0) {
            return bad("batch sizes must be positive");
        }
        if self.repeats == 0 {
            return bad("repeats must be positive");
        }
        let lat = [
            self.fetch_latency_ms,
            self.preprocess_latency_ms,
            self.infer_latency_ms_per_item,
            self.infer_latency_ms_per_call,
        ];
        if lat.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("latencies must be finite and non-negative");
        }
        if self.classes < 2 || self.embed_dim == 0 {
            return bad("classes must be >= 2 and embed_dim >= 1");
        }
        Ok(())
    }

    fn latency(&self) -> SyntheticLatency {
        let ms = |v: f64| Duration::from_secs_f64(v / 1000.0);
        SyntheticLatency {
            fetch: ms(self.fetch_latency_ms),
            preprocess: ms(self.preprocess_latency_ms),
            infer_per_item: ms(self.infer_latency_ms_per_item),
            infer_per_call: ms(self.infer_latency_ms_per_call),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub repeat: usize,
    /// Position of this run in the shuffled execution order.
    pub order: usize,
    pub latency_s: f64,
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: PipelineMode,
    pub batch_size: usize,
    pub latency_mean_s: f64,
    /// Sample standard deviation; absent with fewer than three runs.
    pub latency_std_s: Option<f64>,
    pub throughput_mean: f64,
    pub runs: Vec<RunRecord>,
    pub selected_ids: Vec<SampleId>,
    /// Set when any run of the cell failed or selected the wrong samples.
    pub error: Option<String>,
}

impl CellResult {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario: BenchScenario,
    pub cells: Vec<CellResult>,
}

impl BenchResult {
    pub fn cell(&self, mode: PipelineMode, batch_size: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.batch_size == batch_size)
    }

    /// Mean throughput of `mode` over mean throughput of `baseline`.
    pub fn speedup(&self, mode: PipelineMode, baseline: PipelineMode, batch_size: usize) -> Option<f64> {
        let a = self.cell(mode, batch_size)?;
        let b = self.cell(baseline, batch_size)?;
        (a.ok() && b.ok()).then(|| a.throughput_mean / b.throughput_mean)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }

    pub fn read_json(path: impl AsRef<Path>) -> std::io::Result<Self> {
        serde_json::from_slice(&std::fs::read(path)?).map_err(std::io::Error::other)
    }

    /// One row per cell.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::Output(e.to_string()))?;
        w.write_record([
            "mode",
            "batch_size",
            "runs",
            "latency_mean_s",
            "latency_std_s",
            "throughput_mean",
            "status",
        ])
        .map_err(|e| BenchError::Output(e.to_string()))?;
        for c in &self.cells {
            w.write_record([
                c.mode.name().to_string(),
                c.batch_size.to_string(),
                c.runs.len().to_string(),
                format!("{:.6}", c.latency_mean_s),
                c.latency_std_s.map(|s| format!("{s:.6}")).unwrap_or_default(),
                format!("{:.3}", c.throughput_mean),
                c.error.clone().unwrap_or_else(|| "ok".into()),
            ])
            .map_err(|e| BenchError::Output(e.to_string()))?;
        }
        w.flush().map_err(|e| BenchError::Output(e.to_string()))
    }

    /// `results.json` and `results.csv` in `dir`.
    pub fn write_outputs(&self, dir: impl AsRef<Path>) -> Result<(), BenchError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| BenchError::Output(e.to_string()))?;
        self.write_json(dir.join("results.json"))
            .map_err(|e| BenchError::Output(e.to_string()))?;
        self.write_csv(dir.join("results.csv"))
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("scenarios differ in {field}")]
    ScenarioMismatch { field: &'static str },
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("writing results failed: {0}")]
    Output(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// The selection a strategy makes on matrices computed sample by sample,
/// bypassing the data manager, batching and the pipeline entirely. Only
/// meaningful for backends whose outputs equal the mock model's.
pub fn direct_selection(
    manifest: &DatasetManifest,
    query: &ALQuery,
    backend: &BackendSpec,
    transform: &Transform,
) -> Result<Vec<SampleId>, BenchError> {
    let source = UriFetcher::new(FetchConfig::default());
    let labeled: std::collections::BTreeSet<SampleId> = query.labeled_ids.iter().copied().collect();
    let (mut probs, mut embeds, mut ids) = (vec![], vec![], vec![]);
    let (mut lab_embeds, mut lab_ids) = (vec![], vec![]);
    for s in &manifest.samples {
        let url = crate::model::parse_sample_uri(&s.uri).map_err(DataError::from)?;
        let bytes = source.fetch(&url).map_err(|cause| DataError::FetchFailed {
            uri: s.uri.clone(),
            cause,
        })?;
        let values = transform(&bytes).map_err(|e| BenchError::Setup(e.to_string()))?;
        let (p, e) = mock_model(
            &FeatureVector { id: s.id, values },
            &backend.model_version,
            backend.classes,
            backend.embed_dim,
        );
        if labeled.contains(&s.id) {
            lab_embeds.push(e);
            lab_ids.push(s.id);
        } else {
            probs.push(p);
            embeds.push(e);
            ids.push(s.id);
        }
    }
    let labeled_embeds = if lab_ids.is_empty() {
        EmbeddingMatrix::empty(backend.embed_dim)
    } else {
        EmbeddingMatrix::from_rows(&lab_embeds, lab_ids).map_err(StrategyError::from)?
    };
    let input = StrategyInput {
        probs: Some(ProbabilityMatrix::from_rows(&probs, ids.clone()).map_err(StrategyError::from)?),
        embeds: Some(EmbeddingMatrix::from_rows(&embeds, ids.clone()).map_err(StrategyError::from)?),
        labeled_embeds: Some(labeled_embeds),
        candidates: Some(ids),
        budget: query.budget,
        seed: query.seed,
    };
    let mut selected = run_strategy(query.strategy, &input)?.ids;
    selected.sort_unstable();
    Ok(selected)
}

struct Cell {
    mode: PipelineMode,
    batch_size: usize,
    runs: Vec<RunRecord>,
    ids: Option<Vec<SampleId>>,
    error: Option<String>,
}

/// Runs every (mode, batch size) cell `repeats` times, interleaving cells in
/// a shuffled order. The synthetic pool is written under `work_dir`.
pub fn run_scenario(s: &BenchScenario, work_dir: &Path) -> Result<BenchResult, BenchError> {
    s.validate()?;
    let uris = synth::write_pool(&work_dir.join("pool"), s.pool_size, s.seed)
        .map_err(|e| BenchError::Setup(e.to_string()))?;
    let data = Arc::new(DataManager::open(
        work_dir.join("data"),
        work_dir.join("cache"),
        FetchConfig::default(),
    )?);
    let manifest = data.ingest(&uris, "bench", "alaas-bench")?;
    let model_version = "bench-v1";
    let (backend_spec, _stub) = match s.backend {
        BenchBackend::Mock => (BackendSpec::mock(model_version, s.classes, s.embed_dim), None),
        BenchBackend::RemoteStub {
            per_call_ms,
            per_item_ms,
        } => {
            let stub = StubServer::start(StubConfig {
                classes: s.classes,
                embed_dim: s.embed_dim,
                per_call_delay: Duration::from_secs_f64(per_call_ms / 1000.0),
                per_row_delay: Duration::from_secs_f64(per_item_ms / 1000.0),
                ..StubConfig::default()
            })
            .map_err(|e| BenchError::Setup(e.to_string()))?;
            (
                BackendSpec::remote(stub.url(), model_version, s.classes, s.embed_dim),
                Some(stub),
            )
        }
    };
    run_cells(s, data, &manifest, &backend_spec)
}

/// Measures the cells of `s` over an already ingested `manifest`.
///
/// A run that fails, or selects other samples than the direct strategy run,
/// marks its cell failed; the remaining cells still run.
pub fn run_cells(
    s: &BenchScenario,
    data: Arc<DataManager>,
    manifest: &DatasetManifest,
    backend_spec: &BackendSpec,
) -> Result<BenchResult, BenchError> {
    s.validate()?;
    if manifest.len() != s.pool_size {
        return Err(BenchError::InvalidScenario(format!(
            "manifest has {} samples, scenario expects {}",
            manifest.len(),
            s.pool_size
        )));
    }
    let transform = TransformRegistry::default()
        .get(DEFAULT_TRANSFORM)
        .expect("default transform is registered");
    let query = |bs| ALQuery {
        dataset_id: manifest.dataset_id,
        strategy: s.strategy,
        budget: s.budget,
        batch_size: bs,
        seed: s.seed,
        labeled_ids: vec![],
    };
    let expected = direct_selection(manifest, &query(1), backend_spec, &transform)?;

    let mut cells: Vec<Cell> = Vec::new();
    for &mode in &s.modes {
        for &batch_size in &s.batch_sizes {
            cells.push(Cell {
                mode,
                batch_size,
                runs: Vec::new(),
                ids: None,
                error: None,
            });
        }
    }
    let mut order: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..s.repeats).map(move |r| (c, r)))
        .collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(s.seed));

    for (position, (ci, repeat)) in order.into_iter().enumerate() {
        let cell = &mut cells[ci];
        if cell.error.is_some() {
            continue;
        }
        let spec = PipelineSpec {
            mode: cell.mode,
            queue_capacity: 4 * cell.batch_size,
            batch: BatchPolicy::new(cell.batch_size, Duration::from_millis(s.max_wait_ms)),
            cache: CachePolicy::NoCache,
            latency: s.latency(),
            ..PipelineSpec::default()
        };
        let outcome = backend_from_spec(backend_spec)
            .map_err(|e| e.to_string())
            .and_then(|b| Pipeline::new(data.clone(), b, spec).map_err(|e| e.to_string()))
            .and_then(|p| p.run_round(manifest, &query(cell.batch_size)).map_err(|e| e.to_string()));
        match outcome {
            Ok(out) => {
                let mut ids = out.report.selected_ids();
                ids.sort_unstable();
                if ids != expected {
                    cell.error = Some("selection differs from the direct strategy run".into());
                } else if cell.ids.as_ref().is_some_and(|prev| *prev != ids) {
                    cell.error = Some("selection differs between repeats".into());
                }
                cell.ids = Some(ids);
                let latency = out.report.timing.wall_clock;
                cell.runs.push(RunRecord {
                    repeat,
                    order: position,
                    latency_s: latency,
                    throughput: s.pool_size as f64 / latency,
                });
            }
            Err(e) => {
                log::warn!("cell {} bs={} failed: {e}", cell.mode, cell.batch_size);
                cell.error = Some(e);
            }
        }
    }

    let cells = cells
        .into_iter()
        .map(|mut c| {
            c.runs.sort_by_key(|r| r.repeat);
            let lat: Vec<f64> = c.runs.iter().map(|r| r.latency_s).collect();
            let thr: Vec<f64> = c.runs.iter().map(|r| r.throughput).collect();
            let measured = !lat.is_empty();
            CellResult {
                mode: c.mode,
                batch_size: c.batch_size,
                latency_mean_s: if measured { mean(&lat) } else { 0.0 },
                latency_std_s: (lat.len() >= 3).then(|| sample_std(&lat)),
                throughput_mean: if measured { mean(&thr) } else { 0.0 },
                runs: c.runs,
                selected_ids: c.ids.unwrap_or_default(),
                error: c.error,
            }
        })
        .collect();
    Ok(BenchResult {
        scenario: s.clone(),
        cells,
    })
}

fn check_same(result: &BenchScenario, baseline: &BenchScenario) -> Result<(), BenchError> {
    let mismatch = |field| Err(BenchError::ScenarioMismatch { field });
    if result.pool_size != baseline.pool_size {
        return mismatch("pool_size");
    }
    if result.budget != baseline.budget {
        return mismatch("budget");
    }
    if result.strategy != baseline.strategy {
        return mismatch("strategy");
    }
    Ok(())
}

fn fmt_latency(c: &CellResult) -> String {
    match c.latency_std_s {
        Some(std) => format!("{:.3} ± {:.3}", c.latency_mean_s, std),
        None => format!("{:.3}", c.latency_mean_s),
    }
}

/// Markdown table of `result` against `baseline`, one row per cell present in
/// both. The ratio column is throughput over baseline throughput.
pub fn compare_report(result: &BenchResult, baseline: &BenchResult) -> Result<String, BenchError> {
    check_same(&result.scenario, &baseline.scenario)?;
    let base: BTreeMap<(PipelineMode, usize), &CellResult> = baseline
        .cells
        .iter()
        .map(|c| ((c.mode, c.batch_size), c))
        .collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| Mode | BS | Latency (s) | Throughput (items/s) | Baseline latency (s) | Baseline throughput (items/s) | Ratio |"
    );
    let _ = writeln!(out, "|---|---:|---:|---:|---:|---:|---:|");
    for c in &result.cells {
        let Some(b) = base.get(&(c.mode, c.batch_size)) else {
            continue;
        };
        let ratio = if c.ok() && b.ok() && b.throughput_mean > 0.0 {
            format!("{:.2}", c.throughput_mean / b.throughput_mean)
        } else {
            "failed".to_string()
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.2} | {} | {:.2} | {} |",
            c.mode,
            c.batch_size,
            fmt_latency(c),
            c.throughput_mean,
            fmt_latency(b),
            b.throughput_mean,
            ratio
        );
    }
    Ok(out)
}

/// Markdown summary of one result (mode rows, latency and throughput).
pub fn summary_table(result: &BenchResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| Mode | BS | Runs | Latency (s) | Throughput (items/s) | Status |");
    let _ = writeln!(out, "|---|---:|---:|---:|---:|---|");
    for c in &result.cells {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:.2} | {} |",
            c.mode,
            c.batch_size,
            c.runs.len(),
            fmt_latency(c),
            c.throughput_mean,
            c.error.as_deref().unwrap_or("ok")
        );
    }
    out
}
