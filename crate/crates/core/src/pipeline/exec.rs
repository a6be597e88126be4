use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded};
use parking_lot::Mutex;

use super::{
    compute_metrics, FailurePolicy, Pipeline, PipelineError, PipelineMode, RoundOutput,
    StageEvent, Transform,
};
use crate::data::{CachePolicy, InferenceRow};
use crate::inference::{batch_collect, infer_batch, BatchPolicy, FeatureVector};
use crate::model::{
    now_utc, ALQuery, ALReport, ContentHash, DatasetManifest, EmbeddingMatrix, JobId,
    ProbabilityMatrix, SampleId, SelectedSample, Stage,
};
use crate::strategy::{run_strategy, Selection, StrategyInput};

struct Fetched {
    id: SampleId,
    hash: ContentHash,
    bytes: Vec<u8>,
}

struct Prepared {
    id: SampleId,
    hash: ContentHash,
    values: Vec<f64>,
}

struct Row {
    id: SampleId,
    hash: ContentHash,
    prob: Vec<f64>,
    embed: Vec<f64>,
}

struct Scored {
    rows: Vec<Row>,
    /// Produced by the backend in this run (as opposed to read from cache).
    fresh: bool,
}

/// Per-run state shared by every stage worker.
struct Run<'a> {
    p: &'a Pipeline,
    manifest: &'a DatasetManifest,
    transform: Transform,
    max_batch: usize,
    base: Instant,
    events: Mutex<Vec<StageEvent>>,
    aborted: AtomicBool,
    error: Mutex<Option<PipelineError>>,
    skipped: Mutex<Vec<SampleId>>,
}

fn pause(d: Duration) {
    if !d.is_zero() {
        std::thread::sleep(d);
    }
}

impl Run<'_> {
    fn stopped(&self) -> bool {
        self.aborted.load(Ordering::SeqCst) || self.p.cancel.is_cancelled()
    }

    fn at(&self, t: Instant) -> f64 {
        t.duration_since(self.base).as_secs_f64()
    }

    fn record(&self, stage: Stage, id: SampleId, start: Instant, end: Instant) {
        let e = StageEvent {
            stage,
            id,
            start: self.at(start),
            end: self.at(end),
        };
        self.events.lock().push(e);
    }

    /// Records events for `ids` sharing one interval, each taking an equal slice.
    fn record_split(&self, stage: Stage, ids: &[SampleId], start: Instant, end: Instant) {
        let (s, e) = (self.at(start), self.at(end));
        let step = (e - s) / ids.len().max(1) as f64;
        let mut events = self.events.lock();
        for (k, &id) in ids.iter().enumerate() {
            let lo = s + step * k as f64;
            let hi = if k + 1 == ids.len() { e } else { lo + step };
            events.push(StageEvent {
                stage,
                id,
                start: lo,
                end: hi,
            });
        }
    }

    /// Handles a failure. Per-sample failures honour the skip policy;
    /// anything else stops the run.
    fn fail(&self, id: SampleId, err: PipelineError, per_sample: bool) {
        if per_sample && self.p.spec.failure_policy == FailurePolicy::Skip {
            log::warn!("skipping sample {id}: {err}");
            self.skipped.lock().push(id);
            return;
        }
        let mut slot = self.error.lock();
        if slot.is_none() {
            *slot = Some(err);
        }
        self.aborted.store(true, Ordering::SeqCst);
    }

    fn cached(&self, id: SampleId) -> Option<Row> {
        if self.p.spec.cache != CachePolicy::Cache {
            return None;
        }
        let spec = self.p.backend.spec();
        let hash = self.p.data.known_hash(self.manifest.dataset_id, id)?;
        let row = self.p.data.get_cached_inference(&hash, &spec.model_version)?;
        (row.prob_row.len() == spec.classes && row.embed_row.len() == spec.embed_dim).then_some(Row {
            id,
            hash,
            prob: row.prob_row,
            embed: row.embed_row,
        })
    }

    fn fetch(&self, id: SampleId) -> Option<Fetched> {
        let start = Instant::now();
        let result = self.p.data.fetch(self.manifest.dataset_id, id, self.p.spec.cache);
        pause(self.p.spec.latency.fetch);
        self.record(Stage::Fetch, id, start, Instant::now());
        match result {
            Ok(f) => Some(Fetched {
                id,
                hash: f.content_hash,
                bytes: f.bytes,
            }),
            Err(e) => {
                self.fail(id, e.into(), true);
                None
            }
        }
    }

    fn prepare(&self, f: Fetched) -> Option<Prepared> {
        let start = Instant::now();
        let result = (self.transform)(&f.bytes);
        pause(self.p.spec.latency.preprocess);
        self.record(Stage::Preprocess, f.id, start, Instant::now());
        match result {
            Ok(values) => Some(Prepared {
                id: f.id,
                hash: f.hash,
                values,
            }),
            Err(source) => {
                self.fail(f.id, PipelineError::Preprocess { id: f.id, source }, true);
                None
            }
        }
    }

    fn infer(&self, batch: Vec<Prepared>) -> Option<Vec<Row>> {
        let lat = self.p.spec.latency;
        let start = Instant::now();
        pause(lat.infer_per_call + lat.infer_per_item * batch.len() as u32);
        let (meta, features): (Vec<_>, Vec<_>) = batch
            .into_iter()
            .map(|p| {
                (
                    (p.id, p.hash),
                    FeatureVector {
                        id: p.id,
                        values: p.values,
                    },
                )
            })
            .unzip();
        let result = infer_batch(&*self.p.backend, &features);
        let ids: Vec<SampleId> = meta.iter().map(|(id, _)| *id).collect();
        self.record_split(Stage::Infer, &ids, start, Instant::now());
        match result {
            Ok((probs, embeds)) => Some(
                meta.into_iter()
                    .enumerate()
                    .map(|(i, (id, hash))| Row {
                        id,
                        hash,
                        prob: probs.row(i).to_vec(),
                        embed: embeds.row(i).to_vec(),
                    })
                    .collect(),
            ),
            Err(e) => {
                self.fail(ids[0], e.into(), false);
                None
            }
        }
    }

    /// Writes freshly inferred rows to the inference cache.
    fn write_back(&self, rows: &[Row]) {
        if self.p.spec.cache != CachePolicy::Cache || rows.is_empty() {
            return;
        }
        let version = &self.p.backend.spec().model_version;
        let entries = rows
            .iter()
            .map(|r| {
                (
                    r.hash,
                    InferenceRow {
                        prob_row: r.prob.clone(),
                        embed_row: r.embed.clone(),
                    },
                )
            })
            .collect();
        if let Err(e) = self.p.data.cache().put_inference_many(version, entries) {
            log::warn!("inference cache write failed: {e}");
        }
    }
}

/// Samples the round must score. KCG/CoreSet also need labeled embeddings,
/// and the whole-dataset baseline always processes everything.
fn working_set(manifest: &DatasetManifest, query: &ALQuery, mode: PipelineMode) -> Vec<SampleId> {
    let everything = mode == PipelineMode::SequentialWhole || query.strategy.needs_labeled_embeds();
    let labeled: BTreeSet<SampleId> = query.labeled_ids.iter().copied().collect();
    manifest
        .samples
        .iter()
        .map(|s| s.id)
        .filter(|id| everything || !labeled.contains(id))
        .collect()
}

fn run_pipelined(run: &Run<'_>, ids: &[SampleId]) -> BTreeMap<SampleId, Row> {
    let spec = &run.p.spec;
    let cap = spec.queue_capacity;
    let (fetch_tx, fetch_rx) = bounded::<SampleId>(cap);
    let (prep_tx, prep_rx) = bounded::<Fetched>(cap);
    let (infer_tx, infer_rx) = bounded::<Prepared>(cap);
    let (batch_tx, batch_rx) = bounded::<Vec<Prepared>>(1);
    let (out_tx, out_rx) = unbounded::<Scored>();
    let policy = BatchPolicy::new(run.max_batch, spec.batch.max_wait);
    let mut rows = BTreeMap::new();

    // Every worker keeps draining its input after a stop so that upstream
    // senders never block on a full queue.
    std::thread::scope(|s| {
        let out = out_tx.clone();
        s.spawn(move || {
            for &id in ids {
                if run.stopped() {
                    break;
                }
                if let Some(row) = run.cached(id) {
                    let _ = out.send(Scored {
                        rows: vec![row],
                        fresh: false,
                    });
                } else if fetch_tx.send(id).is_err() {
                    break;
                }
            }
        });
        for _ in 0..spec.fetch_workers {
            let (rx, tx) = (fetch_rx.clone(), prep_tx.clone());
            s.spawn(move || {
                for id in rx {
                    if run.stopped() {
                        continue;
                    }
                    if let Some(f) = run.fetch(id) {
                        let _ = tx.send(f);
                    }
                }
            });
        }
        drop((fetch_rx, prep_tx));
        for _ in 0..spec.preprocess_workers {
            let (rx, tx) = (prep_rx.clone(), infer_tx.clone());
            s.spawn(move || {
                for f in rx {
                    if run.stopped() {
                        continue;
                    }
                    if let Some(p) = run.prepare(f) {
                        let _ = tx.send(p);
                    }
                }
            });
        }
        drop((prep_rx, infer_tx));
        s.spawn(move || {
            for batch in batch_collect(policy, infer_rx) {
                if run.stopped() {
                    continue;
                }
                let _ = batch_tx.send(batch);
            }
        });
        for _ in 0..spec.infer_workers {
            let (rx, out) = (batch_rx.clone(), out_tx.clone());
            s.spawn(move || {
                for batch in rx {
                    if run.stopped() {
                        continue;
                    }
                    if let Some(rows) = run.infer(batch) {
                        let _ = out.send(Scored { rows, fresh: true });
                    }
                }
            });
        }
        drop((batch_rx, out_tx));
        for scored in out_rx {
            if scored.fresh {
                run.write_back(&scored.rows);
            }
            rows.extend(scored.rows.into_iter().map(|r| (r.id, r)));
        }
    });
    rows
}

fn run_sequential(run: &Run<'_>, ids: &[SampleId]) -> BTreeMap<SampleId, Row> {
    let mut rows = BTreeMap::new();
    let mut todo = Vec::new();
    for &id in ids {
        match run.cached(id) {
            Some(row) => {
                rows.insert(id, row);
            }
            None => todo.push(id),
        }
    }
    let mut fetched = Vec::with_capacity(todo.len());
    for id in todo {
        if run.stopped() {
            return rows;
        }
        fetched.extend(run.fetch(id));
    }
    let mut prepared = Vec::with_capacity(fetched.len());
    for f in fetched {
        if run.stopped() {
            return rows;
        }
        prepared.extend(run.prepare(f));
    }
    let mut prepared = prepared.into_iter().peekable();
    while prepared.peek().is_some() {
        if run.stopped() {
            return rows;
        }
        let batch: Vec<Prepared> = prepared.by_ref().take(run.max_batch).collect();
        if let Some(scored) = run.infer(batch) {
            run.write_back(&scored);
            rows.extend(scored.into_iter().map(|r| (r.id, r)));
        }
    }
    rows
}

/// Runs the strategy over the scored rows, pool and labeled split by the query.
fn select(
    query: &ALQuery,
    rows: &BTreeMap<SampleId, Row>,
    classes: usize,
    dim: usize,
) -> Result<(Selection, Vec<SampleId>), PipelineError> {
    let labeled: BTreeSet<SampleId> = query.labeled_ids.iter().copied().collect();
    let (lab, pool): (Vec<&Row>, Vec<&Row>) = rows.values().partition(|r| labeled.contains(&r.id));
    let pool_ids: Vec<SampleId> = pool.iter().map(|r| r.id).collect();
    let probs = ProbabilityMatrix::new(
        classes,
        pool.iter().flat_map(|r| r.prob.iter().copied()).collect(),
        pool_ids.clone(),
    )
    .map_err(crate::strategy::StrategyError::from)?;
    let embeds = EmbeddingMatrix::new(
        dim,
        pool.iter().flat_map(|r| r.embed.iter().copied()).collect(),
        pool_ids.clone(),
    )
    .map_err(crate::strategy::StrategyError::from)?;
    let labeled_embeds = EmbeddingMatrix::new(
        dim,
        lab.iter().flat_map(|r| r.embed.iter().copied()).collect(),
        lab.iter().map(|r| r.id).collect(),
    )
    .map_err(crate::strategy::StrategyError::from)?;
    let input = StrategyInput {
        probs: Some(probs),
        embeds: Some(embeds),
        labeled_embeds: Some(labeled_embeds),
        candidates: Some(pool_ids.clone()),
        budget: query.budget,
        seed: query.seed,
    };
    Ok((run_strategy(query.strategy, &input)?, pool_ids))
}

pub(super) fn run(
    p: &Pipeline,
    manifest: &DatasetManifest,
    query: &ALQuery,
    transform: Transform,
) -> Result<RoundOutput, PipelineError> {
    let backend = p.backend.spec();
    let run = Run {
        p,
        manifest,
        transform,
        max_batch: query.batch_size.min(backend.batch_limit).max(1),
        base: Instant::now(),
        events: Mutex::new(Vec::new()),
        aborted: AtomicBool::new(false),
        error: Mutex::new(None),
        skipped: Mutex::new(Vec::new()),
    };
    let ids = working_set(manifest, query, p.spec.mode);
    let rows = match p.spec.mode {
        PipelineMode::Pipelined => run_pipelined(&run, &ids),
        _ => run_sequential(&run, &ids),
    };
    p.data.flush()?;
    if let Some(e) = run.error.lock().take() {
        return Err(e);
    }
    if p.cancel.is_cancelled() {
        return Err(PipelineError::Cancelled);
    }

    let start = Instant::now();
    let (selection, pool_ids) = select(query, &rows, backend.classes, backend.embed_dim)?;
    let end = Instant::now();
    run.record_split(Stage::Select, &pool_ids, start, end);

    let wall = run.at(end);
    let mut events = run.events.into_inner();
    events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.stage.cmp(&b.stage)));
    let mut timing = compute_metrics(&events, wall, &p.spec.workers());
    let mut skipped = run.skipped.into_inner();
    skipped.sort_unstable();
    timing.skipped = skipped;

    let selected = selection
        .ids
        .iter()
        .zip(&selection.scores)
        .map(|(&id, &score)| SelectedSample {
            id,
            uri: manifest.samples[id.index()].uri.clone(),
            score,
        })
        .collect();
    Ok(RoundOutput {
        report: ALReport {
            job_id: JobId::random(),
            dataset_id: manifest.dataset_id,
            strategy: query.strategy,
            budget: query.budget,
            selected,
            timing,
            completed_at: now_utc(),
        },
        events,
    })
}
