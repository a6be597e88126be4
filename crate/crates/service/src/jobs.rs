//! Job records and their persisted store.
//!
//! Mutations are serialized behind one lock and published as immutable
//! snapshots, so readers never block writers. Each record is mirrored to
//! `<dir>/<job_id>.json` before the new snapshot becomes visible.
//!
//! Restart policy: a record found `queued` stays queued, a record found
//! `running` goes back to `queued` with its attempt count kept. A job that
//! has already been started [`MAX_ATTEMPTS`] times is marked `failed`
//! instead, so a query that crashes the server cannot loop forever.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use alaas_core::data::write_atomic;
use alaas_core::model::{now_utc, ALQuery, ALReport, JobId};
use arc_swap::ArcSwap;
use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cancelled)
    }

    /// Transitions a live server may make.
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Running) | (Queued, Cancelled) | (Running, Done) | (Running, Failed) | (Running, Cancelled)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: JobId,
    pub state: JobState,
    pub query: ALQuery,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ALReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub submitted_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// How many times a worker has started this job.
    #[serde(default)]
    pub attempts: u32,
}

impl JobRecord {
    /// Report present iff done, error present iff failed.
    pub fn is_consistent(&self) -> bool {
        self.report.is_some() == (self.state == JobState::Done)
            && self.error.is_some() == (self.state == JobState::Failed)
    }
}

#[derive(Debug, Error)]
pub enum JobError {
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {id} cannot go from {from:?} to {to:?}")]
    BadTransition { id: JobId, from: JobState, to: JobState },
    #[error("job store I/O: {0}")]
    Io(#[from] std::io::Error),
}

type Snapshot = HashMap<JobId, Arc<JobRecord>>;

pub struct JobStore {
    dir: PathBuf,
    records: ArcSwap<Snapshot>,
    write: Mutex<()>,
}

impl JobStore {
    /// Loads every record under `dir`, applies the restart policy and
    /// returns the store plus the jobs to queue, oldest first.
    pub fn open(dir: impl Into<PathBuf>) -> Result<(Self, Vec<JobId>), JobError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut records = Snapshot::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            match read_record(&path) {
                Ok(r) => {
                    records.insert(r.job_id, Arc::new(r));
                }
                Err(e) => log::warn!("ignoring unreadable job record {}: {e}", path.display()),
            }
        }
        let store = Self {
            dir,
            records: ArcSwap::from_pointee(Snapshot::new()),
            write: Mutex::new(()),
        };
        let mut requeue = Vec::new();
        for (id, rec) in &mut records {
            if rec.state != JobState::Running {
                if rec.state == JobState::Queued {
                    requeue.push((rec.submitted_at, *id));
                }
                continue;
            }
            let mut r = (**rec).clone();
            r.updated_at = now_utc();
            if r.attempts >= MAX_ATTEMPTS {
                r.state = JobState::Failed;
                r.error = Some(format!("interrupted by a server restart {} times", r.attempts));
            } else {
                r.state = JobState::Queued;
                requeue.push((r.submitted_at, *id));
            }
            store.persist(&r)?;
            *rec = Arc::new(r);
        }
        requeue.sort();
        store.records.store(Arc::new(records));
        Ok((store, requeue.into_iter().map(|(_, id)| id).collect()))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: JobId) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    fn persist(&self, r: &JobRecord) -> Result<(), JobError> {
        let json = serde_json::to_vec_pretty(r).expect("job record serializes");
        write_atomic(&self.path(r.job_id), &json)?;
        Ok(())
    }

    pub fn get(&self, id: JobId) -> Option<Arc<JobRecord>> {
        self.records.load().get(&id).cloned()
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.records.load_full()
    }

    fn publish(&self, r: JobRecord) -> Result<Arc<JobRecord>, JobError> {
        self.persist(&r)?;
        let r = Arc::new(r);
        let mut next = (**self.records.load()).clone();
        next.insert(r.job_id, r.clone());
        self.records.store(Arc::new(next));
        Ok(r)
    }

    /// Records a new queued job.
    pub fn submit(&self, query: ALQuery) -> Result<Arc<JobRecord>, JobError> {
        let _w = self.write.lock();
        let now = now_utc();
        self.publish(JobRecord {
            job_id: JobId::random(),
            state: JobState::Queued,
            query,
            report: None,
            error: None,
            submitted_at: now,
            updated_at: now,
            attempts: 0,
        })
    }

    fn transition(
        &self,
        id: JobId,
        to: JobState,
        edit: impl FnOnce(&mut JobRecord),
    ) -> Result<Arc<JobRecord>, JobError> {
        self.transition_if(id, |_| true, to, edit)
    }

    fn transition_if(
        &self,
        id: JobId,
        from: impl FnOnce(JobState) -> bool,
        to: JobState,
        edit: impl FnOnce(&mut JobRecord),
    ) -> Result<Arc<JobRecord>, JobError> {
        let _w = self.write.lock();
        let cur = self.get(id).ok_or(JobError::UnknownJob(id))?;
        if !cur.state.can_become(to) || !from(cur.state) {
            return Err(JobError::BadTransition {
                id,
                from: cur.state,
                to,
            });
        }
        let mut r = (*cur).clone();
        r.state = to;
        r.updated_at = now_utc();
        edit(&mut r);
        debug_assert!(r.is_consistent());
        self.publish(r)
    }

    pub fn start(&self, id: JobId) -> Result<Arc<JobRecord>, JobError> {
        self.transition(id, JobState::Running, |r| r.attempts += 1)
    }

    pub fn finish(&self, id: JobId, report: ALReport) -> Result<Arc<JobRecord>, JobError> {
        self.transition(id, JobState::Done, |r| r.report = Some(report))
    }

    pub fn fail(&self, id: JobId, message: String) -> Result<Arc<JobRecord>, JobError> {
        self.transition(id, JobState::Failed, |r| r.error = Some(message))
    }

    pub fn mark_cancelled(&self, id: JobId) -> Result<Arc<JobRecord>, JobError> {
        self.transition(id, JobState::Cancelled, |_| {})
    }

    /// Cancels a queued job outright. Anything else is returned unchanged;
    /// a running job must be stopped by its worker.
    pub fn cancel(&self, id: JobId) -> Result<Arc<JobRecord>, JobError> {
        match self.transition_if(id, |s| s == JobState::Queued, JobState::Cancelled, |_| {}) {
            Err(JobError::BadTransition { .. }) => self.get(id).ok_or(JobError::UnknownJob(id)),
            Ok(r) if r.state == JobState::Cancelled => Ok(r),
            other => other,
        }
    }
}

fn read_record(path: &Path) -> Result<JobRecord, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let r: JobRecord = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    if !r.is_consistent() {
        return Err("report/error do not match the state".into());
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alaas_core::model::{DatasetId, StrategyKind};

    fn query() -> ALQuery {
        ALQuery {
            dataset_id: DatasetId::random(),
            strategy: StrategyKind::LC,
            budget: 3,
            batch_size: 4,
            seed: 1,
            labeled_ids: vec![],
        }
    }

    #[test]
    fn state_machine_edges() {
        use JobState::*;
        let all = [Queued, Running, Done, Failed, Cancelled];
        let allowed: Vec<_> = all
            .iter()
            .flat_map(|&a| all.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| a.can_become(b))
            .collect();
        assert_eq!(
            allowed,
            vec![
                (Queued, Running),
                (Queued, Cancelled),
                (Running, Done),
                (Running, Failed),
                (Running, Cancelled)
            ]
        );
    }

    #[test]
    fn lifecycle_is_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let (store, requeue) = JobStore::open(dir.path()).unwrap();
        assert!(requeue.is_empty());
        let id = store.submit(query()).unwrap().job_id;
        assert_eq!(store.start(id).unwrap().attempts, 1);
        let failed = store.fail(id, "boom".into()).unwrap();
        assert_eq!(failed.state, JobState::Failed);
        assert!(matches!(store.start(id), Err(JobError::BadTransition { .. })));
        let (again, requeue) = JobStore::open(dir.path()).unwrap();
        assert!(requeue.is_empty());
        assert_eq!(*again.get(id).unwrap(), *failed);
    }

    #[test]
    fn cancel_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = JobStore::open(dir.path()).unwrap();
        let a = store.submit(query()).unwrap().job_id;
        assert_eq!(store.cancel(a).unwrap().state, JobState::Cancelled);
        assert_eq!(store.cancel(a).unwrap().state, JobState::Cancelled);
        let b = store.submit(query()).unwrap().job_id;
        store.start(b).unwrap();
        assert_eq!(store.cancel(b).unwrap().state, JobState::Running);
        assert!(matches!(store.cancel(JobId::random()), Err(JobError::UnknownJob(_))));
    }

    #[test]
    fn restart_requeues_interrupted_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = JobStore::open(dir.path()).unwrap();
        let queued = store.submit(query()).unwrap().job_id;
        let running = store.submit(query()).unwrap().job_id;
        store.start(running).unwrap();
        drop(store);

        let (store, mut requeue) = JobStore::open(dir.path()).unwrap();
        requeue.sort();
        let mut want = vec![queued, running];
        want.sort();
        assert_eq!(requeue, want);
        assert_eq!(store.get(running).unwrap().state, JobState::Queued);
        assert_eq!(store.get(running).unwrap().attempts, 1);

        // Keep crashing the same job: it eventually fails for good.
        let mut store = store;
        for _ in 1..MAX_ATTEMPTS {
            store.start(running).unwrap();
            drop(store);
            store = JobStore::open(dir.path()).unwrap().0;
        }
        let requeue: Vec<_> = store
            .snapshot()
            .values()
            .filter(|r| r.state == JobState::Queued)
            .map(|r| r.job_id)
            .collect();
        assert_eq!(requeue, vec![queued]);
        let r = store.get(running).unwrap();
        assert_eq!(r.state, JobState::Failed);
        assert!(r.is_consistent());
    }

    #[test]
    fn unreadable_records_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("junk.json"), b"{not json").unwrap();
        let (store, requeue) = JobStore::open(dir.path()).unwrap();
        assert!(requeue.is_empty() && store.snapshot().is_empty());
    }
}
