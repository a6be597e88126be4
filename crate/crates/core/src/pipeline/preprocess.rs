use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

/// Number of features produced by [`preprocess`].
pub const HISTOGRAM_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error("empty payload")]
    EmptyPayload,
    #[error("{0}")]
    Failed(String),
}

/// Maps raw payload bytes to model input features.
pub type Transform = Arc<dyn Fn(&[u8]) -> Result<Vec<f64>, TransformError> + Send + Sync>;

/// Byte histogram over 256 bins, normalized to unit sum.
pub fn preprocess(bytes: &[u8]) -> Result<Vec<f64>, TransformError> {
    if bytes.is_empty() {
        return Err(TransformError::EmptyPayload);
    }
    let mut counts = [0u64; HISTOGRAM_BINS];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let total = bytes.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / total).collect())
}

/// Named transforms. `"histogram"` is always present.
#[derive(Clone)]
pub struct TransformRegistry {
    transforms: BTreeMap<String, Transform>,
}

pub const DEFAULT_TRANSFORM: &str = "histogram";

impl Default for TransformRegistry {
    fn default() -> Self {
        let mut r = Self {
            transforms: BTreeMap::new(),
        };
        r.register(DEFAULT_TRANSFORM, Arc::new(preprocess));
        r
    }
}

impl TransformRegistry {
    pub fn register(&mut self, name: impl Into<String>, transform: Transform) {
        self.transforms.insert(name.into(), transform);
    }

    pub fn get(&self, name: &str) -> Option<Transform> {
        self.transforms.get(name).cloned()
    }

    pub fn names(&self) -> Vec<&str> {
        self.transforms.keys().map(String::as_str).collect()
    }
}
