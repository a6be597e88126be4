use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use alaas_core::data::{CachePolicy, DataManager, FetchConfig};
use alaas_core::inference::{backend_from_spec, mock_model, BackendSpec, FeatureVector};
use alaas_core::model::{
    ALQuery, DatasetManifest, EmbeddingMatrix, ProbabilityMatrix, SampleId, Stage, StrategyKind,
};
use alaas_core::pipeline::{
    preprocess, run_baseline_dataflow, run_round, write_trace, read_trace, CancelToken,
    FailurePolicy, Pipeline, PipelineError, PipelineMode, PipelineSpec, StageEvent,
    SyntheticLatency,
};
use alaas_core::strategy::{run_strategy, StrategyInput};
use alaas_core::synth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    _dir: tempfile::TempDir,
    data: Arc<DataManager>,
    manifest: DatasetManifest,
}

fn fixture(n: usize, seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let uris = synth::write_pool(&dir.path().join("pool"), n, seed).unwrap();
    let data = DataManager::open(dir.path().join("data"), dir.path().join("cache"), FetchConfig::default())
        .unwrap();
    let manifest = data.ingest(&uris, "synthetic", "tests").unwrap();
    Fixture {
        _dir: dir,
        data: Arc::new(data),
        manifest,
    }
}

fn query(m: &DatasetManifest, strategy: StrategyKind, budget: usize, bs: usize, seed: u64) -> ALQuery {
    ALQuery {
        dataset_id: m.dataset_id,
        strategy,
        budget,
        batch_size: bs,
        seed,
        labeled_ids: vec![],
    }
}

/// Strategy run directly on matrices computed without the pipeline.
fn direct(m: &DatasetManifest, q: &ALQuery, backend: &BackendSpec) -> BTreeSet<SampleId> {
    let labeled: BTreeSet<SampleId> = q.labeled_ids.iter().copied().collect();
    let mut pool = (vec![], vec![], vec![]);
    let mut lab = (vec![], vec![]);
    for s in &m.samples {
        let path = url::Url::parse(&s.uri).unwrap().to_file_path().unwrap();
        let values = preprocess(&std::fs::read(path).unwrap()).unwrap();
        let (p, e) = mock_model(
            &FeatureVector { id: s.id, values },
            &backend.model_version,
            backend.classes,
            backend.embed_dim,
        );
        if labeled.contains(&s.id) {
            lab.0.push(e);
            lab.1.push(s.id);
        } else {
            pool.0.push(p);
            pool.1.push(e);
            pool.2.push(s.id);
        }
    }
    let input = StrategyInput {
        probs: Some(ProbabilityMatrix::from_rows(&pool.0, pool.2.clone()).unwrap()),
        embeds: Some(EmbeddingMatrix::from_rows(&pool.1, pool.2.clone()).unwrap()),
        labeled_embeds: Some(if lab.0.is_empty() {
            EmbeddingMatrix::empty(backend.embed_dim)
        } else {
            EmbeddingMatrix::from_rows(&lab.0, lab.1).unwrap()
        }),
        candidates: Some(pool.2),
        budget: q.budget,
        seed: q.seed,
    };
    run_strategy(q.strategy, &input).unwrap().ids.into_iter().collect()
}

fn ids_of(events: &[StageEvent], stage: Stage) -> impl Iterator<Item = &StageEvent> {
    events.iter().filter(move |e| e.stage == stage)
}

#[test]
fn lc_selection_matches_direct_strategy_run() {
    let f = fixture(100, 1);
    let backend = BackendSpec::mock("mock-v1", 10, 16);
    let q = query(&f.manifest, StrategyKind::LC, 10, 16, 0);
    let out = run_round(f.data.clone(), &f.manifest, &q, PipelineSpec::default(), &backend).unwrap();
    let ids: BTreeSet<SampleId> = out.report.selected_ids().into_iter().collect();
    assert_eq!(out.report.selected.len(), 10);
    assert_eq!(ids, direct(&f.manifest, &q, &backend));
    for s in &out.report.selected {
        assert_eq!(s.uri, f.manifest.samples[s.id.index()].uri);
    }
    // Report is sorted by descending score.
    assert!(out.report.selected.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn capacity_one_completes_with_bounded_residency() {
    let f = fixture(10, 2);
    let backend = BackendSpec::mock("m", 3, 4);
    let spec = PipelineSpec {
        queue_capacity: 1,
        fetch_workers: 1,
        preprocess_workers: 1,
        latency: SyntheticLatency::uniform_ms(1.0),
        ..PipelineSpec::default()
    };
    let q = query(&f.manifest, StrategyKind::ES, 3, 4, 0);
    let out = run_round(f.data.clone(), &f.manifest, &q, spec, &backend).unwrap();
    assert_eq!(out.report.selected.len(), 3);
    for stage in [Stage::Fetch, Stage::Preprocess, Stage::Infer] {
        assert_eq!(ids_of(&out.events, stage).count(), 10, "{stage:?}");
    }
    // Between the start of its fetch and the end of its inference a sample is
    // resident. Three item queues of capacity one, one queued batch, one
    // batch being assembled and one in flight, plus the workers' hands.
    let bound = 3 + 3 * 4 + 2;
    let spans: Vec<(f64, f64)> = f
        .manifest
        .samples
        .iter()
        .map(|s| {
            let fetch = ids_of(&out.events, Stage::Fetch).find(|e| e.id == s.id).unwrap();
            let infer = ids_of(&out.events, Stage::Infer).find(|e| e.id == s.id).unwrap();
            (fetch.start, infer.end)
        })
        .collect();
    for &(t, _) in &spans {
        let resident = spans.iter().filter(|&&(a, b)| a <= t && t < b).count();
        assert!(resident <= bound, "{resident} resident at {t}");
    }
}

#[test]
fn residency_is_bounded_on_a_large_pool() {
    let f = fixture(300, 3);
    let backend = BackendSpec::mock("m", 3, 4);
    let spec = PipelineSpec {
        queue_capacity: 1,
        fetch_workers: 2,
        preprocess_workers: 1,
        latency: SyntheticLatency {
            infer_per_item: Duration::from_millis(1),
            ..Default::default()
        },
        ..PipelineSpec::default()
    };
    let bs = 4;
    let q = query(&f.manifest, StrategyKind::LC, 5, bs, 0);
    let out = run_round(f.data.clone(), &f.manifest, &q, spec, &backend).unwrap();
    let mut fetch_start = vec![0.0; 300];
    let mut infer_end = vec![0.0; 300];
    for e in &out.events {
        match e.stage {
            Stage::Fetch => fetch_start[e.id.index()] = e.start,
            Stage::Infer => infer_end[e.id.index()] = e.end,
            _ => {}
        }
    }
    // capacity x 3 item queues + 1 queued batch + batch being filled +
    // batch in flight + one item per fetch/preprocess worker.
    let bound = 3 + 3 * bs + 3;
    let max_resident = fetch_start
        .iter()
        .map(|&t| (0..300).filter(|&i| fetch_start[i] <= t && t < infer_end[i]).count())
        .max()
        .unwrap();
    assert!(max_resident <= bound, "max resident {max_resident} > {bound}");
    assert!(max_resident < 300 / 4);
}

#[test]
fn pipelined_mode_overlaps_fetch_and_infer() {
    let f = fixture(200, 4);
    let backend = BackendSpec::mock("m", 4, 8);
    let spec = PipelineSpec {
        latency: SyntheticLatency::uniform_ms(0.2),
        ..PipelineSpec::default()
    };
    let q = query(&f.manifest, StrategyKind::MC, 5, 8, 0);
    let out = run_round(f.data.clone(), &f.manifest, &q, spec, &backend).unwrap();
    let witness = ids_of(&out.events, Stage::Infer).any(|i| {
        ids_of(&out.events, Stage::Fetch).any(|fe| fe.start > i.start && fe.id > i.id)
    });
    assert!(witness, "no fetch started after an earlier sample's inference");
}

#[test]
fn sequential_whole_has_no_overlap() {
    let f = fixture(60, 5);
    let backend = BackendSpec::mock("m", 4, 8);
    let q = query(&f.manifest, StrategyKind::RC, 5, 8, 0);
    let out = run_baseline_dataflow(
        PipelineMode::SequentialWhole,
        f.data.clone(),
        &f.manifest,
        &q,
        PipelineSpec::default(),
        &backend,
    )
    .unwrap();
    let max = |s| ids_of(&out.events, s).map(|e| e.end).fold(f64::MIN, f64::max);
    let min = |s| ids_of(&out.events, s).map(|e| e.start).fold(f64::MAX, f64::min);
    assert!(max(Stage::Fetch) <= min(Stage::Preprocess));
    assert!(max(Stage::Preprocess) <= min(Stage::Infer));
    assert!(max(Stage::Fetch) <= min(Stage::Infer));
    assert!(max(Stage::Infer) <= min(Stage::Select));
    assert!(run_baseline_dataflow(
        PipelineMode::Pipelined,
        f.data.clone(),
        &f.manifest,
        &q,
        PipelineSpec::default(),
        &backend
    )
    .is_err());
}

#[test]
fn schedule_does_not_change_selection() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..12u64 {
        let n = rng.random_range(12..40);
        let f = fixture(n, 100 + case);
        let backend = BackendSpec::mock(format!("v{case}"), rng.random_range(2..6), rng.random_range(2..6));
        let strategy = StrategyKind::ALL[case as usize % StrategyKind::ALL.len()];
        let mut q = query(&f.manifest, strategy, rng.random_range(1..6), rng.random_range(1..9), rng.random());
        if case % 3 == 0 {
            q.labeled_ids = vec![SampleId(0), SampleId(n as u64 - 1)];
        }
        let expected = direct(&f.manifest, &q, &backend);
        let schedules = [
            PipelineSpec::with_mode(PipelineMode::SequentialWhole),
            PipelineSpec::with_mode(PipelineMode::SequentialRounds),
            PipelineSpec::default(),
            PipelineSpec {
                queue_capacity: 1,
                fetch_workers: 3,
                preprocess_workers: 3,
                infer_workers: 2,
                ..PipelineSpec::default()
            },
            PipelineSpec {
                cache: CachePolicy::NoCache,
                ..PipelineSpec::default()
            },
        ];
        for spec in schedules {
            let mode = spec.mode;
            let out = run_round(f.data.clone(), &f.manifest, &q, spec, &backend).unwrap();
            let got: BTreeSet<SampleId> = out.report.selected_ids().into_iter().collect();
            assert_eq!(got, expected, "case {case} {strategy:?} {mode}");
            assert!(got.iter().all(|id| !q.labeled_ids.contains(id)));
        }
    }
}

#[test]
fn pipelined_is_at_least_twice_as_fast_with_equal_stage_latencies() {
    let f = fixture(1000, 6);
    let backend = BackendSpec::mock("m", 10, 16);
    let q = query(&f.manifest, StrategyKind::LC, 10, 16, 0);
    let spec = |mode| PipelineSpec {
        mode,
        cache: CachePolicy::NoCache,
        latency: SyntheticLatency::uniform_ms(1.0),
        ..PipelineSpec::default()
    };
    let seq = run_round(f.data.clone(), &f.manifest, &q, spec(PipelineMode::SequentialWhole), &backend)
        .unwrap();
    let pip = run_round(f.data.clone(), &f.manifest, &q, spec(PipelineMode::Pipelined), &backend).unwrap();
    let (s, p) = (seq.report.timing.wall_clock, pip.report.timing.wall_clock);
    assert!(p < 0.5 * s, "pipelined {p:.3}s vs sequential {s:.3}s");
    assert!(pip.report.timing.throughput >= 2.0 * seq.report.timing.throughput);
    assert_eq!(seq.report.selected_ids(), pip.report.selected_ids());
}

#[test]
fn cancellation_stops_the_run() {
    let f = fixture(400, 7);
    let backend = backend_from_spec(&BackendSpec::mock("m", 3, 4)).unwrap();
    let spec = PipelineSpec {
        cache: CachePolicy::NoCache,
        latency: SyntheticLatency::uniform_ms(2.0),
        ..PipelineSpec::default()
    };
    let token = CancelToken::new();
    let pipeline = Pipeline::new(f.data.clone(), backend.clone(), spec)
        .unwrap()
        .with_cancel_token(token.clone());
    let q = query(&f.manifest, StrategyKind::LC, 5, 16, 0);
    let start = Instant::now();
    let result = std::thread::scope(|s| {
        let h = s.spawn(|| pipeline.run_round(&f.manifest, &q));
        std::thread::sleep(Duration::from_millis(60));
        token.cancel();
        h.join().unwrap()
    });
    assert!(matches!(result, Err(PipelineError::Cancelled)), "{result:?}");
    // A full run needs > 800 ms of injected inference delay alone.
    assert!(start.elapsed() < Duration::from_millis(500));
    assert!(backend.calls() < 400 / 16);
}

#[test]
fn failing_sample_aborts_or_is_skipped() {
    let f = fixture(30, 8);
    let victim = &f.manifest.samples[7];
    std::fs::remove_file(url::Url::parse(&victim.uri).unwrap().to_file_path().unwrap()).unwrap();
    let backend = BackendSpec::mock("m", 3, 4);
    let q = query(&f.manifest, StrategyKind::LC, 29, 4, 0);
    for mode in PipelineMode::ALL {
        let err = run_round(f.data.clone(), &f.manifest, &q, PipelineSpec::with_mode(mode), &backend)
            .unwrap_err();
        assert!(
            matches!(err, PipelineError::Data(alaas_core::data::DataError::FetchFailed { .. })),
            "{mode}: {err}"
        );
        let skip = PipelineSpec {
            failure_policy: FailurePolicy::Skip,
            ..PipelineSpec::with_mode(mode)
        };
        let out = run_round(f.data.clone(), &f.manifest, &q, skip, &backend).unwrap();
        assert_eq!(out.report.timing.skipped, vec![victim.id]);
        assert_eq!(out.report.selected.len(), 29);
        assert!(!out.report.selected_ids().contains(&victim.id));
    }
}

#[test]
fn unreachable_backend_aborts() {
    let f = fixture(10, 9);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut backend = BackendSpec::remote(format!("http://127.0.0.1:{port}"), "m", 3, 4);
    backend.timeout_ms = 200;
    let q = query(&f.manifest, StrategyKind::LC, 2, 4, 0);
    let err = run_round(
        f.data.clone(),
        &f.manifest,
        &q,
        PipelineSpec {
            failure_policy: FailurePolicy::Skip,
            ..PipelineSpec::default()
        },
        &backend,
    )
    .unwrap_err();
    assert!(matches!(
        err,
        PipelineError::Inference(alaas_core::inference::InferenceError::BackendUnavailable(_))
    ));
}

#[test]
fn second_round_is_served_from_cache() {
    let f = fixture(50, 10);
    let backend = backend_from_spec(&BackendSpec::mock("mock-v1", 4, 4)).unwrap();
    let pipeline = Pipeline::new(f.data.clone(), backend.clone(), PipelineSpec::default()).unwrap();
    let q = query(&f.manifest, StrategyKind::KCG, 5, 8, 0);
    let first = pipeline.run_round(&f.manifest, &q).unwrap();
    assert_eq!(f.data.remote_accesses(), 50);
    let calls = backend.calls();
    assert!(calls > 0);
    let second = pipeline.run_round(&f.manifest, &q).unwrap();
    assert_eq!(f.data.remote_accesses(), 50);
    assert_eq!(backend.calls(), calls);
    assert_eq!(first.report.selected_ids(), second.report.selected_ids());
    assert_eq!(ids_of(&second.events, Stage::Fetch).count(), 0);

    // A different model version misses the inference cache but not the payload cache.
    let other = backend_from_spec(&BackendSpec::mock("mock-v2", 4, 4)).unwrap();
    Pipeline::new(f.data.clone(), other.clone(), PipelineSpec::default())
        .unwrap()
        .run_round(&f.manifest, &q)
        .unwrap();
    assert_eq!(f.data.remote_accesses(), 50);
    assert!(other.calls() > 0);
}

#[test]
fn multi_round_selections_are_disjoint() {
    let f = fixture(40, 11);
    let backend = backend_from_spec(&BackendSpec::mock("m", 3, 4)).unwrap();
    for mode in PipelineMode::ALL {
        let p = Pipeline::new(f.data.clone(), backend.clone(), PipelineSpec::with_mode(mode)).unwrap();
        let rounds = p
            .run_rounds(&f.manifest, &query(&f.manifest, StrategyKind::KCG, 6, 8, 0), 3)
            .unwrap();
        let all: BTreeSet<SampleId> = rounds.iter().flat_map(|r| r.report.selected_ids()).collect();
        assert_eq!(all.len(), 18, "{mode}");
    }
}

#[test]
fn events_and_metrics_are_consistent() {
    let f = fixture(40, 12);
    let backend = BackendSpec::mock("m", 3, 4);
    let q = query(&f.manifest, StrategyKind::ES, 4, 8, 0);
    let out = run_round(f.data.clone(), &f.manifest, &q, PipelineSpec::default(), &backend).unwrap();
    assert!(out.events.iter().all(|e| e.end >= e.start));
    let t = &out.report.timing;
    for stage in Stage::ALL {
        assert_eq!(t.stages[&stage].items, 40, "{stage:?}");
    }
    assert!((t.throughput - 40.0 / t.wall_clock).abs() < 1e-9);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    write_trace(&path, &out.events).unwrap();
    assert_eq!(read_trace(&path).unwrap(), out.events);
}
