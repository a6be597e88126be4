#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use alaas_service::{serve, ServiceConfig, ServiceHandle};
use serde_json::{json, Value};

pub fn config(dir: &Path) -> ServiceConfig {
    let mut cfg = ServiceConfig::for_data_dir(dir.join("data"));
    cfg.server.port = 0;
    cfg.infer.classes = 4;
    cfg.infer.embed_dim = 8;
    cfg
}

pub fn start(dir: &Path) -> ServiceHandle {
    serve(config(dir)).expect("server starts")
}

pub fn pool(dir: &Path, n: usize, seed: u64) -> Vec<String> {
    alaas_core::synth::write_pool(&dir.join("pool"), n, seed).unwrap()
}

pub struct Schemas(Value);

impl Schemas {
    pub fn load() -> Self {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas/protocol.json");
        Self(serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap())
    }

    pub fn check(&self, def: &str, value: &Value) -> Result<(), String> {
        let mut schema = self.0.clone();
        schema["$ref"] = json!(format!("#/$defs/{def}"));
        let validator = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;
        let errors: Vec<String> = validator.iter_errors(value).map(|e| format!("{e} at {}", e.instance_path())).collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(format!("{def}: {}", errors.join("; ")))
        }
    }

    pub fn assert(&self, def: &str, value: &Value) {
        if let Err(e) = self.check(def, value) {
            panic!("{e}\n{value:#}");
        }
    }
}

/// Minimal raw HTTP access for status-code and body assertions.
pub struct Http {
    pub base: String,
    agent: ureq::Agent,
}

impl Http {
    pub fn new(base: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base.into(),
            agent,
        }
    }

    fn read(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> (u16, String) {
        let mut resp = resp.expect("request sent");
        let status = resp.status().as_u16();
        let body = resp.body_mut().with_config().limit(u64::MAX).read_to_string().unwrap();
        (status, body)
    }

    pub fn get_raw(&self, path: &str) -> (u16, String) {
        Self::read(self.agent.get(&format!("{}{path}", self.base)).call())
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let (s, b) = self.get_raw(path);
        (s, serde_json::from_str(&b).unwrap_or(Value::Null))
    }

    pub fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let (s, b) = Self::read(self.agent.post(&format!("{}{path}", self.base)).send_json(body));
        (s, serde_json::from_str(&b).unwrap_or(Value::Null))
    }

    pub fn post_text(&self, path: &str, body: &str) -> (u16, Value) {
        let (s, b) = Self::read(
            self.agent
                .post(&format!("{}{path}", self.base))
                .header("content-type", "application/json")
                .send(body),
        );
        (s, serde_json::from_str(&b).unwrap_or(Value::Null))
    }

    pub fn delete(&self, path: &str) -> (u16, Value) {
        let (s, b) = Self::read(self.agent.delete(&format!("{}{path}", self.base)).call());
        (s, serde_json::from_str(&b).unwrap_or(Value::Null))
    }

    /// Polls a job until it leaves queued/running.
    pub fn wait_job(&self, job: &str, timeout: Duration) -> Value {
        let deadline = Instant::now() + timeout;
        loop {
            let (status, rec) = self.get(&format!("/v1/queries/{job}"));
            assert_eq!(status, 200, "{rec}");
            if !matches!(rec["state"].as_str(), Some("queued" | "running")) {
                return rec;
            }
            assert!(Instant::now() < deadline, "job {job} still {}", rec["state"]);
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

pub fn temp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_alaas"))
}
