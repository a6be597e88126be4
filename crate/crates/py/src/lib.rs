//! Python bindings: strategies on in-memory matrices, the HTTP client, an
//! in-process server and the benchmark runner.
//!
//! Structured results cross the boundary as JSON and are decoded with the
//! stdlib `json` module, so Python sees plain dicts and lists.

use std::sync::Mutex;

use alaas_core::bench::{run_scenario, BenchScenario};
use alaas_core::model::{EmbeddingMatrix, ProbabilityMatrix, SampleId, StrategyKind, STRATEGY_ALIASES};
use alaas_core::strategy::{run_strategy, score_es, score_lc, score_mc, score_rc, StrategyInput};
use alaas_service::api::QueryRequest;
use alaas_service::{Client as RsClient, ClientConfig, ServiceConfig, ServiceHandle};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_strategy(name: &str, beta: Option<u32>) -> Result<StrategyKind, String> {
    let kind = StrategyKind::from_alias(name)
        .ok_or_else(|| format!("unknown strategy {name:?}; expected one of {}", StrategyKind::alias_list()))?;
    match (kind, beta) {
        (StrategyKind::DBAL { .. }, Some(0)) => Err("beta must be positive".into()),
        (StrategyKind::DBAL { .. }, Some(beta)) => Ok(StrategyKind::DBAL { beta }),
        (_, Some(_)) => Err(format!("beta only applies to DBAL, not {}", kind.name())),
        (kind, None) => Ok(kind),
    }
}

/// Builds a strategy input. Pool rows default to ids 0..n. Labeled rows get
/// ids from the top of the id space so they never collide with the pool.
fn build_input(
    probs: Option<Vec<Vec<f64>>>,
    embeds: Option<Vec<Vec<f64>>>,
    labeled: Option<Vec<Vec<f64>>>,
    ids: Option<Vec<u64>>,
    budget: usize,
    seed: u64,
) -> Result<StrategyInput, String> {
    let n = probs.as_ref().or(embeds.as_ref()).map(Vec::len).or(ids.as_ref().map(Vec::len));
    let n = n.ok_or("need probs, embeds or ids")?;
    let ids: Vec<SampleId> = match ids {
        Some(ids) if ids.len() != n => return Err(format!("{} ids for {n} rows", ids.len())),
        Some(ids) => ids.into_iter().map(SampleId).collect(),
        None => (0..n as u64).map(SampleId).collect(),
    };
    let probs = probs
        .map(|rows| ProbabilityMatrix::from_rows(&rows, ids.clone()))
        .transpose()
        .map_err(|e| e.to_string())?;
    let embeds = embeds
        .map(|rows| EmbeddingMatrix::from_rows(&rows, ids.clone()))
        .transpose()
        .map_err(|e| e.to_string())?;
    let dim = embeds.as_ref().map(|e| e.dim());
    let labeled_embeds = match (labeled, dim) {
        (Some(rows), _) if !rows.is_empty() => {
            let lids = (0..rows.len() as u64).map(|i| SampleId(u64::MAX - i)).collect();
            Some(EmbeddingMatrix::from_rows(&rows, lids).map_err(|e| e.to_string())?)
        }
        (_, Some(d)) => Some(EmbeddingMatrix::empty(d)),
        _ => None,
    };
    Ok(StrategyInput {
        probs,
        embeds,
        labeled_embeds,
        candidates: Some(ids),
        budget,
        seed,
    })
}

/// All accepted strategy names.
#[pyfunction]
fn strategy_aliases() -> Vec<&'static str> {
    STRATEGY_ALIASES.iter().flat_map(|(_, a)| a.iter().copied()).collect()
}

/// Runs a strategy and returns `(ids, scores)` in pick order.
#[pyfunction]
#[pyo3(signature = (strategy, budget, probs=None, embeds=None, labeled_embeds=None, ids=None, seed=0, beta=None))]
#[allow(clippy::too_many_arguments)]
fn select(
    py: Python<'_>,
    strategy: &str,
    budget: usize,
    probs: Option<Vec<Vec<f64>>>,
    embeds: Option<Vec<Vec<f64>>>,
    labeled_embeds: Option<Vec<Vec<f64>>>,
    ids: Option<Vec<u64>>,
    seed: u64,
    beta: Option<u32>,
) -> PyResult<(Vec<u64>, Vec<f64>)> {
    let kind = parse_strategy(strategy, beta).map_err(value_err)?;
    let input = build_input(probs, embeds, labeled_embeds, ids, budget, seed).map_err(value_err)?;
    let sel = py.detach(|| run_strategy(kind, &input)).map_err(value_err)?;
    Ok((sel.ids.into_iter().map(|i| i.0).collect(), sel.scores))
}

/// Per-row uncertainty scores for LC, MC, RC or ES.
#[pyfunction]
fn scores(strategy: &str, probs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let ids = (0..probs.len() as u64).map(SampleId).collect();
    let m = ProbabilityMatrix::from_rows(&probs, ids).map_err(value_err)?;
    let out = match parse_strategy(strategy, None).map_err(value_err)? {
        StrategyKind::LC => score_lc(&m),
        StrategyKind::MC => score_mc(&m),
        StrategyKind::RC => score_rc(&m),
        StrategyKind::ES => score_es(&m),
        other => return Err(value_err(format!("{} has no per-row score", other.name()))),
    };
    out.map_err(value_err)
}

/// Writes `n` synthetic image files and returns their file:// URIs.
#[pyfunction]
#[pyo3(signature = (dir, n, seed=0))]
fn write_pool(dir: &str, n: usize, seed: u64) -> PyResult<Vec<String>> {
    alaas_core::synth::write_pool(std::path::Path::new(dir), n, seed).map_err(runtime_err)
}

/// Runs a benchmark scenario given as a JSON string and returns the result dict.
#[pyfunction]
fn run_bench<'py>(py: Python<'py>, scenario_json: &str, work_dir: &str) -> PyResult<Bound<'py, PyAny>> {
    let scenario: BenchScenario = serde_json::from_str(scenario_json).map_err(value_err)?;
    let result = py
        .detach(|| run_scenario(&scenario, std::path::Path::new(work_dir)))
        .map_err(runtime_err)?;
    to_py(py, &result)
}

/// An in-process server. Stops on `shutdown()` or when garbage collected.
#[pyclass]
struct Server {
    handle: Mutex<Option<ServiceHandle>>,
    url: String,
}

#[pymethods]
impl Server {
    /// Starts from a YAML config file, or with defaults rooted at `data_dir`.
    #[new]
    #[pyo3(signature = (config=None, data_dir=None, port=0))]
    fn new(py: Python<'_>, config: Option<&str>, data_dir: Option<&str>, port: u16) -> PyResult<Self> {
        let cfg = match (config, data_dir) {
            (Some(path), None) => alaas_service::load_config(path).map_err(value_err)?,
            (None, Some(dir)) => {
                let mut cfg = ServiceConfig::for_data_dir(dir);
                cfg.server.port = port;
                cfg
            }
            _ => return Err(value_err("pass exactly one of config or data_dir")),
        };
        let handle = py.detach(|| alaas_service::serve(cfg)).map_err(runtime_err)?;
        Ok(Self {
            url: handle.url(),
            handle: Mutex::new(Some(handle)),
        })
    }

    #[getter]
    fn url(&self) -> String {
        self.url.clone()
    }

    fn shutdown(&self, py: Python<'_>) {
        let handle = self.handle.lock().unwrap().take();
        if let Some(h) = handle {
            py.detach(|| h.shutdown());
        }
    }
}

#[pyclass]
struct Client {
    inner: RsClient,
}

#[pymethods]
impl Client {
    #[new]
    #[pyo3(signature = (server_url, poll_interval_ms=100, max_poll_time_ms=600_000))]
    fn new(server_url: &str, poll_interval_ms: u64, max_poll_time_ms: u64) -> PyResult<Self> {
        let mut cfg = ClientConfig::new(server_url);
        cfg.poll_interval_ms = poll_interval_ms;
        cfg.max_poll_time_ms = max_poll_time_ms;
        Ok(Self {
            inner: RsClient::new(cfg).map_err(value_err)?,
        })
    }

    fn health<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let h = py.detach(|| self.inner.health()).map_err(runtime_err)?;
        to_py(py, &h)
    }

    /// Registers a dataset and returns its id.
    #[pyo3(signature = (uris, name="dataset"))]
    fn push_uris(&self, py: Python<'_>, uris: Vec<String>, name: &str) -> PyResult<String> {
        let id = py.detach(|| self.inner.push_uris(&uris, name)).map_err(runtime_err)?;
        Ok(id.to_string())
    }

    fn dataset<'py>(&self, py: Python<'py>, dataset_id: &str) -> PyResult<Bound<'py, PyAny>> {
        let id = dataset_id.parse().map_err(value_err)?;
        let m = py.detach(|| self.inner.dataset(id)).map_err(runtime_err)?;
        to_py(py, &m)
    }

    /// Submits a query and blocks until its report is ready.
    #[pyo3(signature = (dataset_id, strategy=None, budget=None, seed=None, labeled_ids=Vec::new()))]
    fn query<'py>(
        &self,
        py: Python<'py>,
        dataset_id: &str,
        strategy: Option<&str>,
        budget: Option<usize>,
        seed: Option<u64>,
        labeled_ids: Vec<u64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut req = QueryRequest::new(dataset_id.parse().map_err(value_err)?);
        req.strategy = strategy.map(|s| parse_strategy(s, None)).transpose().map_err(value_err)?;
        req.budget = budget;
        req.seed = seed;
        req.labeled_ids = labeled_ids.into_iter().map(SampleId).collect();
        let report = py.detach(|| self.inner.query_and_wait_with(&req)).map_err(runtime_err)?;
        to_py(py, &report)
    }

    fn job<'py>(&self, py: Python<'py>, job_id: &str) -> PyResult<Bound<'py, PyAny>> {
        let id = job_id.parse().map_err(value_err)?;
        let rec = py.detach(|| self.inner.job(id)).map_err(runtime_err)?;
        to_py(py, &rec)
    }
}

#[pymodule]
fn alaas(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(strategy_aliases, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(scores, m)?)?;
    m.add_function(wrap_pyfunction!(write_pool, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add_class::<Server>()?;
    m.add_class::<Client>()?;
    Ok(())
}
