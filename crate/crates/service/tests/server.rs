mod common;

use std::collections::HashSet;
use std::time::{Duration, Instant};

use alaas_core::inference::BackendKind;
use alaas_core::pipeline::SyntheticLatency;
use alaas_service::{serve, ServeError};
use common::{config, pool, start, temp, Http, Schemas};
use serde_json::{json, Value};

fn push(http: &Http, uris: &[String]) -> String {
    let (status, body) = http.post("/v1/datasets", &json!({"uris": uris, "name": "pool"}));
    assert_eq!(status, 201, "{body}");
    body["dataset_id"].as_str().unwrap().to_string()
}

fn submit(http: &Http, body: Value) -> String {
    let (status, resp) = http.post("/v1/queries", &body);
    assert_eq!(status, 202, "{resp}");
    resp["job_id"].as_str().unwrap().to_string()
}

#[test]
fn health_and_bind_conflict() {
    let dir = temp();
    let svc = start(dir.path());
    let http = Http::new(svc.url());
    let (status, body) = http.get("/v1/health");
    assert_eq!(status, 200);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["version"], env!("CARGO_PKG_VERSION"));
    Schemas::load().assert("health", &body);

    let mut again = config(dir.path());
    again.server.port = svc.addr().port();
    assert!(matches!(serve(again), Err(ServeError::BindFailed { .. })));
}

#[test]
fn dataset_endpoints() {
    let dir = temp();
    let svc = start(dir.path());
    let http = Http::new(svc.url());
    let schemas = Schemas::load();
    let uris = pool(dir.path(), 3, 1);

    let (status, created) = http.post("/v1/datasets", &json!({"uris": uris, "name": "three"}));
    assert_eq!(status, 201);
    schemas.assert("dataset_created", &created);
    assert_eq!(created["size"], 3);
    let id = created["dataset_id"].as_str().unwrap();
    let (status, manifest) = http.get(&format!("/v1/datasets/{id}"));
    assert_eq!(status, 200);
    schemas.assert("dataset", &manifest);
    let got: Vec<&str> = manifest["samples"].as_array().unwrap().iter().map(|s| s["uri"].as_str().unwrap()).collect();
    assert_eq!(got, uris.iter().map(String::as_str).collect::<Vec<_>>());

    let cases = [
        (json!({"uris": [], "name": "e"}), 400, "EmptyDataset"),
        (json!({"uris": [&uris[0], &uris[0]], "name": "d"}), 409, "DuplicateUri"),
        (json!({"uris": ["gopher://x/y"], "name": "g"}), 400, "UnsupportedScheme"),
        (json!({"uris": [&uris[0]]}), 400, "InvalidRequest"),
        (json!({"uris": [&uris[0]], "name": "x", "extra": 1}), 400, "InvalidRequest"),
    ];
    for (body, want_status, want_code) in cases {
        let (status, err) = http.post("/v1/datasets", &body);
        assert_eq!((status, err["code"].as_str().unwrap()), (want_status, want_code), "{body}");
        schemas.assert("error", &err);
    }
    let (status, err) = http.post_text("/v1/datasets", "{not json");
    assert_eq!(status, 400);
    schemas.assert("error", &err);

    for path in [
        format!("/v1/datasets/{}", alaas_core::model::DatasetId::random()),
        "/v1/datasets/not-an-id".to_string(),
        "/v1/nothing".to_string(),
    ] {
        let (status, err) = http.get(&path);
        assert_eq!(status, 404, "{path}");
        schemas.assert("error", &err);
    }
    let (status, err) = http.delete("/v1/health");
    assert_eq!(status, 405);
    schemas.assert("error", &err);
}

#[test]
fn query_lifecycle() {
    let dir = temp();
    let svc = start(dir.path());
    let http = Http::new(svc.url());
    let schemas = Schemas::load();
    let uris = pool(dir.path(), 30, 2);
    let ds = push(&http, &uris);

    let (status, accepted) = http.post("/v1/queries", &json!({"dataset_id": ds, "strategy": "LeastConfidence", "budget": 5}));
    assert_eq!(status, 202);
    schemas.assert("query_accepted", &accepted);
    let job = accepted["job_id"].as_str().unwrap();
    let rec = http.wait_job(job, Duration::from_secs(30));
    schemas.assert("job", &rec);
    assert_eq!(rec["state"], "done");
    assert_eq!(rec["query"]["strategy"], "LC");
    assert_eq!(rec["query"]["batch_size"], 16, "defaults come from the config");
    let report = &rec["report"];
    schemas.assert("report", report);
    assert_eq!(report["job_id"], job);
    let selected = report["selected"].as_array().unwrap();
    assert_eq!(selected.len(), 5);
    for s in selected {
        assert_eq!(s["uri"], uris[s["id"].as_u64().unwrap() as usize]);
    }

    // Unknown job, unknown dataset, budget too large: nothing gets queued.
    let before = svc.jobs().snapshot().len();
    let (status, err) = http.get(&format!("/v1/queries/{}", alaas_core::model::JobId::random()));
    assert_eq!((status, err["code"].as_str()), (404, Some("UnknownJob")));
    let (status, err) = http.post(
        "/v1/queries",
        &json!({"dataset_id": alaas_core::model::DatasetId::random(), "budget": 1}),
    );
    assert_eq!((status, err["code"].as_str()), (404, Some("UnknownDataset")));
    let (status, err) = http.post("/v1/queries", &json!({"dataset_id": ds, "budget": 31}));
    assert_eq!((status, err["code"].as_str()), (400, Some("BudgetExceedsPool")));
    let (status, err) = http.post("/v1/queries", &json!({"dataset_id": ds, "strategy": "Best"}));
    assert_eq!((status, err["code"].as_str()), (400, Some("InvalidRequest")));
    let (status, err) = http.post("/v1/queries", &json!({"dataset_id": ds, "labeled_ids": [1, 1]}));
    assert_eq!((status, err["code"].as_str()), (400, Some("DuplicateLabeledId")));
    schemas.assert("error", &err);
    assert_eq!(svc.jobs().snapshot().len(), before);

    // Cancelling a finished job leaves it alone.
    let (status, rec) = http.delete(&format!("/v1/queries/{job}"));
    assert_eq!((status, rec["state"].as_str()), (200, Some("done")));
}

#[test]
fn concurrent_queries_are_independent_and_stable() {
    let dir = temp();
    let svc = start(dir.path());
    let http = Http::new(svc.url());
    let ds = push(&http, &pool(dir.path(), 60, 3));
    let body = json!({"dataset_id": ds, "strategy": "KCG", "budget": 6, "seed": 9});
    let jobs: Vec<String> = (0..2).map(|_| submit(&http, body.clone())).collect();
    let other = submit(&http, json!({"dataset_id": ds, "strategy": "Random", "budget": 4, "seed": 1}));
    let ids = |rec: &Value| -> Vec<u64> {
        rec["report"]["selected"].as_array().unwrap().iter().map(|s| s["id"].as_u64().unwrap()).collect()
    };
    let a = http.wait_job(&jobs[0], Duration::from_secs(30));
    let b = http.wait_job(&jobs[1], Duration::from_secs(30));
    let c = http.wait_job(&other, Duration::from_secs(30));
    for r in [&a, &b, &c] {
        assert_eq!(r["state"], "done", "{r}");
    }
    assert_eq!(ids(&a), ids(&b));
    assert_eq!(ids(&c).len(), 4);
    assert_ne!(a["job_id"], b["job_id"]);
}

#[test]
fn failed_job_carries_an_error_and_no_report() {
    let dir = temp();
    let mut cfg = config(dir.path());
    cfg.infer.kind = BackendKind::Remote;
    cfg.infer.endpoint = Some("http://127.0.0.1:1".into());
    cfg.infer.timeout_ms = 500;
    let svc = serve(cfg).unwrap();
    let http = Http::new(svc.url());
    let ds = push(&http, &pool(dir.path(), 10, 4));
    let job = submit(&http, json!({"dataset_id": ds, "budget": 2}));
    let rec = http.wait_job(&job, Duration::from_secs(30));
    Schemas::load().assert("job", &rec);
    assert_eq!(rec["state"], "failed");
    assert!(rec["error"].as_str().unwrap().contains("unavailable"), "{rec}");
    assert!(rec.get("report").is_none());
}

fn slow_config(dir: &std::path::Path, workers: usize) -> alaas_service::ServiceConfig {
    let mut cfg = config(dir);
    cfg.server.workers = workers;
    cfg.pipeline.latency = SyntheticLatency::uniform_ms(50.0);
    cfg.pipeline.fetch_workers = 2;
    cfg.pipeline.preprocess_workers = 1;
    cfg
}

#[test]
fn cancel_queued_and_running_jobs() {
    let dir = temp();
    let svc = serve(slow_config(dir.path(), 1)).unwrap();
    let http = Http::new(svc.url());
    let ds = push(&http, &pool(dir.path(), 200, 5));
    let body = json!({"dataset_id": ds, "budget": 3, "batch_size": 4});
    let running = submit(&http, body.clone());
    let queued = submit(&http, body);

    let (status, rec) = http.delete(&format!("/v1/queries/{queued}"));
    assert_eq!((status, rec["state"].as_str()), (200, Some("cancelled")));

    let deadline = Instant::now() + Duration::from_secs(10);
    while http.get(&format!("/v1/queries/{running}")).1["state"] != "running" {
        assert!(Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(10));
    }
    std::thread::sleep(Duration::from_millis(300));
    let asked = Instant::now();
    http.delete(&format!("/v1/queries/{running}"));
    let rec = http.wait_job(&running, Duration::from_secs(10));
    let took = asked.elapsed();
    assert_eq!(rec["state"], "cancelled");
    // One batch of 4 at 50 ms per item, plus the items already in flight.
    assert!(took < Duration::from_millis(1000), "cancel took {took:?}");
    Schemas::load().assert("job", &rec);
    assert_eq!(http.get(&format!("/v1/queries/{queued}")).1["state"], "cancelled");
}

#[test]
fn polled_states_follow_the_state_machine() {
    let dir = temp();
    let mut cfg = config(dir.path());
    cfg.server.workers = 2;
    cfg.pipeline.latency = SyntheticLatency::uniform_ms(1.0);
    let svc = serve(cfg).unwrap();
    let http = Http::new(svc.url());
    let ds = push(&http, &pool(dir.path(), 40, 6));
    let jobs: Vec<String> = (0..6)
        .map(|i| submit(&http, json!({"dataset_id": ds, "budget": 3, "seed": i})))
        .collect();
    // Cancel a couple at random moments while polling everything.
    let mut seen: Vec<Vec<String>> = vec![Vec::new(); jobs.len()];
    let mut rng = 0x2545F4914F6CDD1Du64;
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let mut live = false;
        for (i, job) in jobs.iter().enumerate() {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            if i.is_multiple_of(3) && rng.is_multiple_of(5) {
                http.delete(&format!("/v1/queries/{job}"));
            }
            let state = http.get(&format!("/v1/queries/{job}")).1["state"].as_str().unwrap().to_string();
            if seen[i].last() != Some(&state) {
                seen[i].push(state.clone());
            }
            live |= matches!(state.as_str(), "queued" | "running");
        }
        if !live {
            break;
        }
        assert!(Instant::now() < deadline);
    }
    let allowed: HashSet<(&str, &str)> = [
        ("queued", "running"),
        ("queued", "cancelled"),
        ("running", "done"),
        ("running", "failed"),
        ("running", "cancelled"),
    ]
    .into_iter()
    .collect();
    for path in &seen {
        for w in path.windows(2) {
            // Polling can miss `running`, so queued -> terminal is also fine.
            let ok = allowed.contains(&(w[0].as_str(), w[1].as_str()))
                || (w[0] == "queued" && matches!(w[1].as_str(), "done" | "failed"));
            assert!(ok, "illegal transition in {path:?}");
        }
        assert!(matches!(path.last().unwrap().as_str(), "done" | "cancelled"), "{path:?}");
    }
}

#[test]
fn resubmitted_uris_hit_the_payload_cache() {
    let dir = temp();
    let svc = start(dir.path());
    let http = Http::new(svc.url());
    let uris = pool(dir.path(), 25, 7);
    let first = push(&http, &uris);
    let job = submit(&http, json!({"dataset_id": first, "budget": 2}));
    assert_eq!(http.wait_job(&job, Duration::from_secs(30))["state"], "done");
    let after_first = svc.remote_accesses();
    assert_eq!(after_first, 25);

    let second = push(&http, &uris);
    assert_ne!(first, second);
    let job = submit(&http, json!({"dataset_id": second, "budget": 2}));
    assert_eq!(http.wait_job(&job, Duration::from_secs(30))["state"], "done");
    assert_eq!(svc.remote_accesses(), after_first);
}

#[test]
fn graceful_shutdown_persists_running_job() {
    let dir = temp();
    let svc = serve(slow_config(dir.path(), 1)).unwrap();
    let http = Http::new(svc.url());
    let ds = push(&http, &pool(dir.path(), 100, 8));
    let running = submit(&http, json!({"dataset_id": ds, "budget": 3, "batch_size": 4}));
    let queued = submit(&http, json!({"dataset_id": ds, "budget": 3, "batch_size": 4}));
    let deadline = Instant::now() + Duration::from_secs(10);
    while http.get(&format!("/v1/queries/{running}")).1["state"] != "running" {
        assert!(Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(10));
    }
    let t = Instant::now();
    svc.shutdown();
    assert!(t.elapsed() < Duration::from_secs(2), "shutdown took {:?}", t.elapsed());

    let svc = serve(config(dir.path())).unwrap();
    let http = Http::new(svc.url());
    let rec = http.get(&format!("/v1/queries/{running}")).1;
    assert!(matches!(rec["state"].as_str(), Some("cancelled" | "done")), "{rec}");
    // The untouched queued job runs after the restart.
    assert_eq!(http.wait_job(&queued, Duration::from_secs(60))["state"], "done");
}
