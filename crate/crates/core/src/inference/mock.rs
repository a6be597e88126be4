//! Deterministic stand-in model.
//!
//! The embedding is a keyed SHA-256 expansion of the model version and the
//! feature values, mapped to `[-1, 1]`. Class probabilities are the softmax
//! of an affine map of the embedding whose weights are drawn from a ChaCha8
//! stream seeded by the model version. No global state.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{assemble, BackendSpec, BatchOutput, FeatureVector, InferenceBackend, InferenceError};

/// Logit scale; large enough that predictions range from confident to uncertain.
const LOGIT_SCALE: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct MockModel {
    version: String,
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl MockModel {
    pub fn new(model_version: &str, classes: usize, dim: usize) -> Self {
        let seed: [u8; 32] = Sha256::new()
            .chain_update(b"alaas-mock-weights\0")
            .chain_update(model_version.as_bytes())
            .finalize()
            .into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let weights = (0..classes * dim)
            .map(|_| rng.random_range(-1.0..1.0) * LOGIT_SCALE / (dim as f64).sqrt())
            .collect();
        let bias = (0..classes).map(|_| rng.random_range(-0.5..0.5)).collect();
        Self {
            version: model_version.to_string(),
            classes,
            dim,
            weights,
            bias,
        }
    }

    pub fn embed(&self, values: &[f64]) -> Vec<f64> {
        let mut keyed = Sha256::new();
        keyed.update(b"alaas-mock-embed\0");
        keyed.update((self.version.len() as u64).to_le_bytes());
        keyed.update(self.version.as_bytes());
        keyed.update((values.len() as u64).to_le_bytes());
        for v in values {
            keyed.update(v.to_bits().to_le_bytes());
        }
        let mut out = Vec::with_capacity(self.dim);
        let mut block = 0u64;
        while out.len() < self.dim {
            let digest = keyed.clone().chain_update(block.to_le_bytes()).finalize();
            for chunk in digest.chunks_exact(8) {
                if out.len() == self.dim {
                    break;
                }
                let x = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                // 53 significant bits -> [0, 1) -> [-1, 1)
                let unit = (x >> 11) as f64 / (1u64 << 53) as f64;
                out.push(unit * 2.0 - 1.0);
            }
            block += 1;
        }
        out
    }

    pub fn probabilities(&self, embedding: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                let w = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + w.iter().zip(embedding).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        exp.iter().map(|e| e / total).collect()
    }

    pub fn predict(&self, feature: &FeatureVector) -> (Vec<f64>, Vec<f64>) {
        let embed = self.embed(&feature.values);
        (self.probabilities(&embed), embed)
    }
}

/// `(prob_row, embed_row)` for one feature vector.
pub fn mock_model(
    feature: &FeatureVector,
    model_version: &str,
    classes: usize,
    dim: usize,
) -> (Vec<f64>, Vec<f64>) {
    MockModel::new(model_version, classes, dim).predict(feature)
}

pub struct MockBackend {
    spec: BackendSpec,
    model: MockModel,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(spec: BackendSpec) -> Self {
        let model = MockModel::new(&spec.model_version, spec.classes, spec.embed_dim);
        Self {
            spec,
            model,
            calls: AtomicU64::new(0),
        }
    }
}

impl InferenceBackend for MockBackend {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn infer(&self, batch: &[FeatureVector]) -> Result<BatchOutput, InferenceError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let (probs, embeds): (Vec<_>, Vec<_>) = batch.iter().map(|f| self.model.predict(f)).unzip();
        assemble(batch, probs, embeds, self.spec.classes, self.spec.embed_dim)
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
