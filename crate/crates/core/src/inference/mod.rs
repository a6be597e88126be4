//! Model inference behind a pluggable backend, plus the size-or-timeout
//! batcher that feeds it.

mod batcher;
mod mock;
mod remote;
pub mod stub;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddingMatrix, MatrixError, ProbabilityMatrix, SampleId};

pub use batcher::{batch_collect, Batcher};
pub use mock::{mock_model, MockBackend, MockModel};
pub use remote::{remote_infer_call, InferRequest, InferResponse, RemoteBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub id: SampleId,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Remote,
}

fn default_batch_limit() -> usize {
    256
}

fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub model_version: String,
    pub classes: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_batch_limit")]
    pub batch_limit: usize,
    /// Per-call timeout for remote backends.
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl BackendSpec {
    pub fn mock(model_version: impl Into<String>, classes: usize, embed_dim: usize) -> Self {
        Self {
            kind: BackendKind::Mock,
            model_version: model_version.into(),
            classes,
            embed_dim,
            endpoint: None,
            batch_limit: default_batch_limit(),
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn remote(
        endpoint: impl Into<String>,
        model_version: impl Into<String>,
        classes: usize,
        embed_dim: usize,
    ) -> Self {
        Self {
            kind: BackendKind::Remote,
            endpoint: Some(endpoint.into()),
            ..Self::mock(model_version, classes, embed_dim)
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        let bad = |m: &str| Err(InferenceError::InvalidSpec(m.to_string()));
        if self.classes < 2 {
            return bad("classes must be >= 2");
        }
        if self.embed_dim < 1 {
            return bad("embed_dim must be >= 1");
        }
        if self.batch_limit < 1 {
            return bad("batch_limit must be >= 1");
        }
        if self.kind == BackendKind::Remote && self.endpoint.is_none() {
            return bad("remote backend needs an endpoint");
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// Size-or-timeout batching: a batch closes at `max_batch` rows or
/// `max_wait` after its first row, whichever comes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPolicy {
    pub max_batch: usize,
    #[serde(with = "millis")]
    pub max_wait: Duration,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        Self {
            max_batch: 16,
            max_wait: Duration::from_millis(10),
        }
    }
}

impl BatchPolicy {
    pub fn new(max_batch: usize, max_wait: Duration) -> Self {
        Self {
            max_batch,
            max_wait,
        }
    }
}

pub(crate) mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// Durations as fractional milliseconds.
pub(crate) mod millis_f64 {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1000.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        Duration::try_from_secs_f64(ms / 1000.0).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("batch of {size} exceeds backend limit {limit}")]
    BatchTooLarge { size: usize, limit: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Model outputs for one batch, rows in input order.
pub type BatchOutput = (ProbabilityMatrix, EmbeddingMatrix);

pub trait InferenceBackend: Send + Sync {
    fn spec(&self) -> &BackendSpec;

    /// Runs the model on a batch the caller has already size-checked.
    fn infer(&self, batch: &[FeatureVector]) -> Result<BatchOutput, InferenceError>;

    /// Number of `infer` calls served so far.
    fn calls(&self) -> u64;
}

/// Builds the backend described by `spec`.
pub fn backend_from_spec(spec: &BackendSpec) -> Result<Arc<dyn InferenceBackend>, InferenceError> {
    spec.validate()?;
    Ok(match spec.kind {
        BackendKind::Mock => Arc::new(MockBackend::new(spec.clone())),
        BackendKind::Remote => Arc::new(RemoteBackend::new(spec.clone())?),
    })
}

/// Runs one batch through `backend`, enforcing `1 <= len <= batch_limit`.
pub fn infer_batch(
    backend: &dyn InferenceBackend,
    batch: &[FeatureVector],
) -> Result<BatchOutput, InferenceError> {
    if batch.is_empty() {
        return Err(InferenceError::EmptyBatch);
    }
    let limit = backend.spec().batch_limit;
    if batch.len() > limit {
        return Err(InferenceError::BatchTooLarge {
            size: batch.len(),
            limit,
        });
    }
    backend.infer(batch)
}

/// Assembles row-aligned matrices from per-row outputs.
pub(crate) fn assemble(
    batch: &[FeatureVector],
    probs: Vec<Vec<f64>>,
    embeds: Vec<Vec<f64>>,
    classes: usize,
    dim: usize,
) -> Result<BatchOutput, InferenceError> {
    let ids: Vec<SampleId> = batch.iter().map(|f| f.id).collect();
    if probs.len() != batch.len() || embeds.len() != batch.len() {
        return Err(InferenceError::MalformedResponse(format!(
            "expected {} rows, got {} probs and {} embeds",
            batch.len(),
            probs.len(),
            embeds.len()
        )));
    }
    if let Some(r) = probs.iter().position(|r| r.len() != classes) {
        return Err(InferenceError::MalformedResponse(format!(
            "prob row {r} has {} entries, expected {classes}",
            probs[r].len()
        )));
    }
    if let Some(r) = embeds.iter().position(|r| r.len() != dim) {
        return Err(InferenceError::MalformedResponse(format!(
            "embed row {r} has {} entries, expected {dim}",
            embeds[r].len()
        )));
    }
    let p = ProbabilityMatrix::new(classes, probs.concat(), ids.clone())
        .map_err(|e| InferenceError::MalformedResponse(e.to_string()))?;
    let e = EmbeddingMatrix::new(dim, embeds.concat(), ids)
        .map_err(|e| InferenceError::MalformedResponse(e.to_string()))?;
    Ok((p, e))
}
