//! Client for the minimal JSON inference protocol:
//! `POST {endpoint}/v1/infer` with `{"model_version", "rows"}`, answered by
//! `{"probs", "embeds"}` with one row per input row.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{assemble, BackendSpec, BatchOutput, FeatureVector, InferenceBackend, InferenceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRequest {
    pub model_version: String,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub probs: Vec<Vec<f64>>,
    pub embeds: Vec<Vec<f64>>,
}

fn agent(spec: &BackendSpec) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(spec.timeout()))
        .http_status_as_error(false)
        .build()
        .into()
}

/// One logical call: a POST, retried once on timeout, connection failure or
/// 5xx. Returns the decoded response and the number of wire attempts made.
pub fn remote_infer_call(
    agent: &ureq::Agent,
    endpoint: &str,
    model_version: &str,
    batch: &[FeatureVector],
) -> Result<(InferResponse, u32), InferenceError> {
    let url = format!("{}/v1/infer", endpoint.trim_end_matches('/'));
    let body = InferRequest {
        model_version: model_version.to_string(),
        rows: batch.iter().map(|f| f.values.clone()).collect(),
    };
    let mut last = String::new();
    for attempt in 1..=2u32 {
        match agent.post(&url).send_json(&body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                if status == 200 {
                    return resp
                        .body_mut()
                        .with_config()
                        .limit(u64::MAX)
                        .read_json::<InferResponse>()
                        .map(|r| (r, attempt))
                        .map_err(|e| InferenceError::MalformedResponse(e.to_string()));
                }
                last = format!("HTTP {status} from {url}");
                if status < 500 {
                    break;
                }
            }
            Err(e) => last = format!("{url}: {e}"),
        }
    }
    Err(InferenceError::BackendUnavailable(last))
}

pub struct RemoteBackend {
    spec: BackendSpec,
    endpoint: String,
    agent: ureq::Agent,
    calls: AtomicU64,
    wire_calls: AtomicU64,
}

impl RemoteBackend {
    pub fn new(spec: BackendSpec) -> Result<Self, InferenceError> {
        spec.validate()?;
        let endpoint = spec.endpoint.clone().expect("validated");
        Ok(Self {
            agent: agent(&spec),
            spec,
            endpoint,
            calls: AtomicU64::new(0),
            wire_calls: AtomicU64::new(0),
        })
    }

    /// HTTP requests sent, retries included.
    pub fn wire_calls(&self) -> u64 {
        self.wire_calls.load(Ordering::SeqCst)
    }
}

impl InferenceBackend for RemoteBackend {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn infer(&self, batch: &[FeatureVector]) -> Result<BatchOutput, InferenceError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let result = remote_infer_call(&self.agent, &self.endpoint, &self.spec.model_version, batch);
        let attempts = match &result {
            Ok((_, n)) => *n as u64,
            Err(_) => 2,
        };
        self.wire_calls.fetch_add(attempts, Ordering::SeqCst);
        let (resp, _) = result?;
        assemble(batch, resp.probs, resp.embeds, self.spec.classes, self.spec.embed_dim)
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
