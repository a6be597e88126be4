//! In-process inference server speaking the remote wire protocol.
//!
//! Answers with the mock model for whatever `model_version` the request
//! names. Per-call and per-row delays emulate serving overhead, and a script
//! of faults can be queued to exercise client retry paths.

use std::collections::VecDeque;
use std::net::ToSocketAddrs;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use socket2::{Domain, Protocol, Socket, Type};

use super::remote::{InferRequest, InferResponse};
use super::{FeatureVector, MockModel};
use crate::model::SampleId;

/// One scripted misbehaviour, consumed by the next incoming call.
#[derive(Debug, Clone, PartialEq)]
pub enum StubFault {
    /// Reply with this status and no body.
    Status(u16),
    /// Sleep before answering normally.
    Delay(Duration),
    /// Answer with every probability doubled (rows sum to 2).
    DoubledProbs,
}

#[derive(Debug, Clone)]
pub struct StubConfig {
    pub classes: usize,
    pub embed_dim: usize,
    pub per_call_delay: Duration,
    pub per_row_delay: Duration,
    pub faults: Vec<StubFault>,
    pub workers: usize,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            embed_dim: 4,
            per_call_delay: Duration::ZERO,
            per_row_delay: Duration::ZERO,
            faults: Vec::new(),
            workers: 4,
        }
    }
}

struct Shared {
    config: StubConfig,
    faults: Mutex<VecDeque<StubFault>>,
    calls: AtomicU64,
}

pub struct StubServer {
    server: Arc<tiny_http::Server>,
    shared: Arc<Shared>,
    port: u16,
    threads: Vec<JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral port on 127.0.0.1.
    pub fn start(config: StubConfig) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0", config)
    }

    pub fn bind(addr: &str, config: StubConfig) -> std::io::Result<Self> {
        let server = tiny_http::Server::from_listener(nodelay_listener(addr)?, None)
            .map_err(std::io::Error::other)?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("stub bound to a non-IP address"))?;
        let server = Arc::new(server);
        let shared = Arc::new(Shared {
            faults: Mutex::new(config.faults.iter().cloned().collect()),
            calls: AtomicU64::new(0),
            config,
        });
        let threads = (0..shared.config.workers.max(1))
            .map(|_| {
                let server = server.clone();
                let shared = shared.clone();
                std::thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        handle(&shared, req);
                    }
                })
            })
            .collect();
        Ok(Self {
            server,
            shared,
            port,
            threads,
        })
    }

    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    /// Inference requests received, failed ones included.
    pub fn calls(&self) -> u64 {
        self.shared.calls.load(Ordering::SeqCst)
    }

    /// Blocks until the server stops (it never does on its own).
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        for _ in 0..self.threads.len() {
            self.server.unblock();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// A listener whose accepted sockets inherit TCP_NODELAY. tiny_http writes
/// responses in 1 KiB chunks, which otherwise stall on delayed ACKs.
fn nodelay_listener(addr: &str) -> std::io::Result<std::net::TcpListener> {
    let addr = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| std::io::Error::other(format!("cannot resolve {addr}")))?;
    let socket = Socket::new(Domain::for_address(addr), Type::STREAM, Some(Protocol::TCP))?;
    socket.set_reuse_address(true)?;
    socket.set_nodelay(true)?;
    socket.bind(&addr.into())?;
    socket.listen(128)?;
    Ok(socket.into())
}

fn json_response(status: u16, body: Vec<u8>) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
        .expect("static header");
    tiny_http::Response::from_data(body)
        .with_status_code(status)
        .with_header(header)
}

fn handle(shared: &Shared, mut req: tiny_http::Request) {
    let path = req.url().split('?').next().unwrap_or("").to_string();
    let response = match (req.method(), path.as_str()) {
        (tiny_http::Method::Get, "/v1/health") => json_response(200, br#"{"status":"ok"}"#.to_vec()),
        (tiny_http::Method::Post, "/v1/infer") => {
            shared.calls.fetch_add(1, Ordering::SeqCst);
            let mut raw = Vec::new();
            let _ = req.as_reader().read_to_end(&mut raw);
            infer(shared, &raw)
        }
        _ => json_response(404, br#"{"code":"NotFound","message":"no such route"}"#.to_vec()),
    };
    let _ = req.respond(response);
}

fn infer(shared: &Shared, raw: &[u8]) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    let fault = shared.faults.lock().pop_front();
    let mut doubled = false;
    match fault {
        Some(StubFault::Status(code)) => return json_response(code, Vec::new()),
        Some(StubFault::Delay(d)) => std::thread::sleep(d),
        Some(StubFault::DoubledProbs) => doubled = true,
        None => {}
    }
    let request: InferRequest = match serde_json::from_slice(raw) {
        Ok(r) => r,
        Err(e) => {
            let body = serde_json::json!({"code": "BadRequest", "message": e.to_string()});
            return json_response(400, body.to_string().into_bytes());
        }
    };
    let cfg = &shared.config;
    let delay = cfg.per_call_delay + cfg.per_row_delay * request.rows.len() as u32;
    if !delay.is_zero() {
        std::thread::sleep(delay);
    }
    let model = MockModel::new(&request.model_version, cfg.classes, cfg.embed_dim);
    let mut response = InferResponse {
        probs: Vec::with_capacity(request.rows.len()),
        embeds: Vec::with_capacity(request.rows.len()),
    };
    for (i, values) in request.rows.into_iter().enumerate() {
        let (mut p, e) = model.predict(&FeatureVector {
            id: SampleId(i as u64),
            values,
        });
        if doubled {
            p.iter_mut().for_each(|v| *v *= 2.0);
        }
        response.probs.push(p);
        response.embeds.push(e);
    }
    json_response(200, serde_json::to_vec(&response).expect("response serializes"))
}
