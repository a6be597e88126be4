use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{SampleId, Stage, StageMetrics, StageStat};

/// One sample passing through one stage. Times are seconds since the start
/// of the run, from a monotonic clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub stage: Stage,
    pub id: SampleId,
    pub start: f64,
    pub end: f64,
}

impl StageEvent {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Aggregates events into per-stage busy/idle times.
///
/// `workers` gives the worker count per stage (missing stages count as one).
/// Busy time is the summed event duration divided by the worker count; idle
/// time is what remains of the wall clock. Throughput counts distinct sample
/// ids over the wall clock.
pub fn compute_metrics(
    events: &[StageEvent],
    wall_clock: f64,
    workers: &BTreeMap<Stage, usize>,
) -> StageMetrics {
    let mut stages: BTreeMap<Stage, StageStat> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    for e in events {
        let stat = stages.entry(e.stage).or_default();
        stat.items += 1;
        stat.busy_time += e.duration();
        ids.insert(e.id);
    }
    for (stage, stat) in stages.iter_mut() {
        let w = workers.get(stage).copied().unwrap_or(1).max(1) as f64;
        stat.busy_time /= w;
        stat.idle_time = (wall_clock - stat.busy_time).max(0.0);
    }
    StageMetrics {
        stages,
        wall_clock,
        throughput: if wall_clock > 0.0 {
            ids.len() as f64 / wall_clock
        } else {
            0.0
        },
        skipped: Vec::new(),
    }
}

/// Writes one JSON object per line.
pub fn write_trace(path: impl AsRef<Path>, events: &[StageEvent]) -> std::io::Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_trace(path: impl AsRef<Path>) -> std::io::Result<Vec<StageEvent>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut events = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line)?);
    }
    Ok(events)
}
