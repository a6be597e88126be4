//! Dataset lifecycle: ingestion, persisted manifests, and cached fetching.
//!
//! Manifests live at `<data_dir>/datasets/<dataset_id>.json` and are written
//! with write-temp-then-rename, so a crash leaves either the old file or the
//! complete new one.
//!
//! Fetches go through a content-addressed [`Cache`]. A payload is looked up by
//! the hash recorded in the manifest, or by the uri -> hash map kept in the
//! cache index, so re-submitting the same URIs under a new dataset still hits.
//! Concurrent fetches of one URI are coalesced: the second caller waits for
//! the first and then reads the cached copy.

mod cache;
mod fetch;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::model::{
    parse_sample_uri, ContentHash, DatasetId, DatasetManifest, SampleId, SampleRef, UriError,
};

pub use cache::{write_atomic, Cache, CacheEntry, IndexCheck, InferenceRow};
pub use fetch::{FetchConfig, RemoteSource, UriFetcher};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("duplicate uri {uri:?}")]
    DuplicateUri { uri: String },
    #[error("unsupported or invalid uri: {0}")]
    UnsupportedScheme(#[from] UriError),
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("unknown dataset {0}")]
    UnknownDataset(DatasetId),
    #[error("sample {id} is not in dataset {dataset}")]
    UnknownSample { dataset: DatasetId, id: SampleId },
    #[error("fetching {uri} failed: {cause}")]
    FetchFailed { uri: String, cause: String },
    #[error("content of {uri} does not match its recorded hash")]
    HashMismatch { uri: String },
    #[error("cache write failed: {0}")]
    CacheWriteFailed(String),
    #[error("malformed cached row: {0}")]
    MalformedRow(String),
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    #[default]
    Cache,
    NoCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchResult {
    pub id: SampleId,
    pub bytes: Vec<u8>,
    pub content_hash: ContentHash,
    pub from_cache: bool,
    /// Seconds spent obtaining the bytes (disk read only on a cache hit).
    pub fetch_time: f64,
}

/// Wraps a [`RemoteSource`] and counts every access that leaves the cache.
struct CountingSource {
    inner: Arc<dyn RemoteSource>,
    count: AtomicU64,
}

pub struct DataManager {
    data_dir: PathBuf,
    manifests: RwLock<HashMap<DatasetId, DatasetManifest>>,
    dirty: Mutex<HashSet<DatasetId>>,
    cache: Cache,
    source: CountingSource,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl DataManager {
    /// Opens a manager with the stock URI fetcher.
    pub fn open(
        data_dir: impl Into<PathBuf>,
        cache_dir: impl Into<PathBuf>,
        fetch: FetchConfig,
    ) -> Result<Self, DataError> {
        Self::with_source(data_dir, cache_dir, Arc::new(UriFetcher::new(fetch)))
    }

    pub fn with_source(
        data_dir: impl Into<PathBuf>,
        cache_dir: impl Into<PathBuf>,
        source: Arc<dyn RemoteSource>,
    ) -> Result<Self, DataError> {
        let data_dir = data_dir.into();
        let datasets = data_dir.join("datasets");
        std::fs::create_dir_all(&datasets)?;
        let manifests = load_manifests(&datasets)?;
        Ok(Self {
            data_dir,
            manifests: RwLock::new(manifests),
            dirty: Mutex::new(HashSet::new()),
            cache: Cache::open(cache_dir)?,
            source: CountingSource {
                inner: source,
                count: AtomicU64::new(0),
            },
            inflight: Mutex::new(HashMap::new()),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    /// Number of fetches that went to the remote source (cache misses and
    /// uncached fetches), since this manager was created.
    pub fn remote_accesses(&self) -> u64 {
        self.source.count.load(Ordering::SeqCst)
    }

    fn manifest_path(&self, id: DatasetId) -> PathBuf {
        self.data_dir.join("datasets").join(format!("{id}.json"))
    }

    /// Registers a dataset. Ids are assigned densely in input order; any
    /// invalid or duplicate URI rejects the whole request.
    pub fn ingest<S: AsRef<str>>(
        &self,
        uris: &[S],
        name: &str,
        owner: &str,
    ) -> Result<DatasetManifest, DataError> {
        if uris.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut seen = HashSet::with_capacity(uris.len());
        for uri in uris {
            let uri = uri.as_ref();
            parse_sample_uri(uri)?;
            if !seen.insert(uri) {
                return Err(DataError::DuplicateUri {
                    uri: uri.to_string(),
                });
            }
        }
        let mut manifest =
            DatasetManifest::from_uris(uris.iter().map(|u| u.as_ref().to_string()), name, owner);
        // Reuse hashes the cache already knows.
        for s in &mut manifest.samples {
            s.content_hash = self.cache.hash_for_uri(&s.uri);
        }
        self.persist(&manifest)?;
        self.manifests
            .write()
            .insert(manifest.dataset_id, manifest.clone());
        Ok(manifest)
    }

    fn persist(&self, manifest: &DatasetManifest) -> Result<(), DataError> {
        let json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
        cache::write_atomic(&self.manifest_path(manifest.dataset_id), &json)?;
        Ok(())
    }

    pub fn manifest(&self, id: DatasetId) -> Option<DatasetManifest> {
        self.manifests.read().get(&id).cloned()
    }

    pub fn dataset_ids(&self) -> Vec<DatasetId> {
        let mut ids: Vec<_> = self.manifests.read().keys().copied().collect();
        ids.sort();
        ids
    }

    fn sample(&self, dataset: DatasetId, id: SampleId) -> Result<SampleRef, DataError> {
        let manifests = self.manifests.read();
        let m = manifests
            .get(&dataset)
            .ok_or(DataError::UnknownDataset(dataset))?;
        m.get(id)
            .cloned()
            .ok_or(DataError::UnknownSample { dataset, id })
    }

    /// Hash of a sample's payload, if it has been seen before.
    pub fn known_hash(&self, dataset: DatasetId, id: SampleId) -> Option<ContentHash> {
        let sample = self.sample(dataset, id).ok()?;
        sample
            .content_hash
            .or_else(|| self.cache.hash_for_uri(&sample.uri))
    }

    fn record_hash(&self, dataset: DatasetId, id: SampleId, hash: ContentHash) -> Result<(), DataError> {
        let mut manifests = self.manifests.write();
        let m = manifests
            .get_mut(&dataset)
            .ok_or(DataError::UnknownDataset(dataset))?;
        let sample = &mut m.samples[id.index()];
        match sample.content_hash {
            Some(existing) if existing != hash => Err(DataError::HashMismatch {
                uri: sample.uri.clone(),
            }),
            Some(_) => Ok(()),
            None => {
                sample.content_hash = Some(hash);
                self.dirty.lock().insert(dataset);
                Ok(())
            }
        }
    }

    fn remote_fetch(&self, uri: &str) -> Result<Vec<u8>, DataError> {
        let parsed = parse_sample_uri(uri)?;
        self.source.count.fetch_add(1, Ordering::SeqCst);
        self.source
            .inner
            .fetch(&parsed)
            .map_err(|cause| DataError::FetchFailed {
                uri: uri.to_string(),
                cause,
            })
    }

    /// Returns the payload of sample `id` in `dataset`.
    ///
    /// With [`CachePolicy::Cache`], a cached payload is served from disk with
    /// no remote access; a corrupted cache file is evicted and refetched once.
    /// On a miss the payload is cached and its hash recorded in the manifest.
    pub fn fetch(
        &self,
        dataset: DatasetId,
        id: SampleId,
        policy: CachePolicy,
    ) -> Result<FetchResult, DataError> {
        let sample = self.sample(dataset, id)?;
        let start = Instant::now();
        if policy == CachePolicy::NoCache {
            let bytes = self.remote_fetch(&sample.uri)?;
            let hash = ContentHash::of(&bytes);
            self.record_hash(dataset, id, hash)?;
            self.cache.remember_uri(&sample.uri, hash);
            return Ok(FetchResult {
                id,
                bytes,
                content_hash: hash,
                from_cache: false,
                fetch_time: start.elapsed().as_secs_f64(),
            });
        }

        let lock = self
            .inflight
            .lock()
            .entry(sample.uri.clone())
            .or_default()
            .clone();
        let result = {
            let _guard = lock.lock();
            self.fetch_cached(dataset, &sample, start)
        };
        {
            let mut inflight = self.inflight.lock();
            // Only the map and this frame hold the lock: nobody else is waiting.
            if Arc::strong_count(&lock) == 2 {
                inflight.remove(&sample.uri);
            }
        }
        result
    }

    fn fetch_cached(
        &self,
        dataset: DatasetId,
        sample: &SampleRef,
        start: Instant,
    ) -> Result<FetchResult, DataError> {
        let known = sample
            .content_hash
            .or_else(|| self.cache.hash_for_uri(&sample.uri));
        if let Some(hash) = known {
            match self.cache.read_payload(&hash) {
                Ok(Some(bytes)) => {
                    self.record_hash(dataset, sample.id, hash)?;
                    return Ok(FetchResult {
                        id: sample.id,
                        bytes,
                        content_hash: hash,
                        from_cache: true,
                        fetch_time: start.elapsed().as_secs_f64(),
                    });
                }
                Ok(None) => {}
                Err(DataError::HashMismatch { .. }) => {
                    log::warn!("cached payload for {} was corrupt; refetching", sample.uri);
                }
                Err(e) => return Err(e),
            }
        }
        let bytes = self.remote_fetch(&sample.uri)?;
        let hash = self.cache.store_payload(&sample.uri, &bytes)?;
        self.record_hash(dataset, sample.id, hash)?;
        Ok(FetchResult {
            id: sample.id,
            bytes,
            content_hash: hash,
            from_cache: false,
            fetch_time: start.elapsed().as_secs_f64(),
        })
    }

    pub fn get_cached_inference(
        &self,
        hash: &ContentHash,
        model_version: &str,
    ) -> Option<InferenceRow> {
        self.cache.get_inference(hash, model_version)
    }

    pub fn put_cached_inference(
        &self,
        hash: ContentHash,
        model_version: &str,
        prob_row: Vec<f64>,
        embed_row: Vec<f64>,
    ) -> Result<(), DataError> {
        self.cache.put_inference(hash, model_version, prob_row, embed_row)
    }

    pub fn evict(&self, max_bytes: u64) -> Result<usize, DataError> {
        let n = self.cache.evict(max_bytes);
        self.cache.flush()?;
        Ok(n)
    }

    /// Persists manifests whose recorded hashes changed and the cache index.
    pub fn flush(&self) -> Result<(), DataError> {
        let dirty: Vec<DatasetId> = self.dirty.lock().drain().collect();
        for id in dirty {
            if let Some(m) = self.manifest(id) {
                self.persist(&m)?;
            }
        }
        self.cache.flush()
    }
}

impl Drop for DataManager {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::warn!("failed to flush data manager: {e}");
        }
    }
}

fn load_manifests(dir: &Path) -> Result<HashMap<DatasetId, DatasetManifest>, DataError> {
    let mut out = HashMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let parsed = std::fs::read(&path)
            .map_err(DataError::from)
            .and_then(|raw| {
                serde_json::from_slice::<DatasetManifest>(&raw)
                    .map_err(|e| DataError::CorruptIndex(format!("{}: {e}", path.display())))
            });
        match parsed {
            Ok(m) => match crate::model::validate_manifest(&m) {
                Ok(()) => {
                    out.insert(m.dataset_id, m);
                }
                Err(v) => log::warn!("skipping invalid manifest {}: {:?}", path.display(), v),
            },
            Err(e) => log::warn!("skipping unreadable manifest: {e}"),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    /// In-memory source with an access counter and a switch to fail.
    #[derive(Default)]
    struct FakeSource {
        files: Mutex<HashMap<String, Vec<u8>>>,
        calls: AtomicUsize,
        delay_ms: u64,
    }

    impl RemoteSource for FakeSource {
        fn fetch(&self, uri: &url::Url) -> Result<Vec<u8>, String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.delay_ms > 0 {
                std::thread::sleep(std::time::Duration::from_millis(self.delay_ms));
            }
            self.files
                .lock()
                .get(uri.as_str())
                .cloned()
                .ok_or_else(|| "not found".to_string())
        }
    }

    fn setup(n: usize, delay_ms: u64) -> (tempfile::TempDir, Arc<FakeSource>, DataManager, Vec<String>) {
        let dir = tempfile::tempdir().unwrap();
        let src = Arc::new(FakeSource {
            delay_ms,
            ..Default::default()
        });
        let uris: Vec<String> = (0..n).map(|i| format!("https://data.example/{i}.bin")).collect();
        for (i, u) in uris.iter().enumerate() {
            src.files.lock().insert(u.clone(), format!("payload-{i}").into_bytes());
        }
        let dm = DataManager::with_source(dir.path().join("data"), dir.path().join("cache"), src.clone())
            .unwrap();
        (dir, src, dm, uris)
    }

    #[test]
    fn ingest_assigns_dense_ids() {
        let (_d, _s, dm, _) = setup(0, 0);
        let m = dm.ingest(&["file:///a", "file:///b"], "n", "o").unwrap();
        assert_eq!(
            m.samples.iter().map(|s| s.id).collect::<Vec<_>>(),
            vec![SampleId(0), SampleId(1)]
        );
        assert!(dm.manifest_path(m.dataset_id).exists());
    }

    #[test]
    fn ingest_rejects_duplicates_atomically() {
        let (dir, _s, dm, _) = setup(0, 0);
        assert!(matches!(
            dm.ingest(&["file:///a", "file:///a"], "n", "o"),
            Err(DataError::DuplicateUri { .. })
        ));
        assert!(matches!(dm.ingest::<&str>(&[], "n", "o"), Err(DataError::EmptyDataset)));
        assert!(matches!(
            dm.ingest(&["gopher://x/y"], "n", "o"),
            Err(DataError::UnsupportedScheme(_))
        ));
        assert_eq!(std::fs::read_dir(dir.path().join("data/datasets")).unwrap().count(), 0);
        assert!(dm.dataset_ids().is_empty());
    }

    #[test]
    fn ingest_scales_to_ten_thousand() {
        let (_d, _s, dm, _) = setup(0, 0);
        let uris: Vec<String> = (0..10_000).map(|i| format!("s3://b/{i}.png")).collect();
        let m = dm.ingest(&uris, "big", "o").unwrap();
        assert_eq!(m.len(), 10_000);
        assert!(m.samples.iter().enumerate().all(|(i, s)| s.id.index() == i));
    }

    #[test]
    fn second_fetch_hits_cache() {
        let (_d, src, dm, uris) = setup(3, 0);
        let m = dm.ingest(&uris, "n", "o").unwrap();
        let first = dm.fetch(m.dataset_id, SampleId(1), CachePolicy::Cache).unwrap();
        assert!(!first.from_cache);
        assert_eq!(first.bytes, b"payload-1");
        assert_eq!(
            dm.manifest(m.dataset_id).unwrap().samples[1].content_hash,
            Some(ContentHash::of(b"payload-1"))
        );
        let second = dm.fetch(m.dataset_id, SampleId(1), CachePolicy::Cache).unwrap();
        assert!(second.from_cache);
        assert_eq!(second.bytes, first.bytes);
        assert_eq!(src.calls.load(Ordering::SeqCst), 1);
        assert_eq!(dm.remote_accesses(), 1);
    }

    #[test]
    fn no_cache_policy_always_goes_remote_with_same_bytes() {
        let (_d, src, dm, uris) = setup(2, 0);
        let m = dm.ingest(&uris, "n", "o").unwrap();
        let a = dm.fetch(m.dataset_id, SampleId(0), CachePolicy::NoCache).unwrap();
        let b = dm.fetch(m.dataset_id, SampleId(0), CachePolicy::Cache).unwrap();
        let c = dm.fetch(m.dataset_id, SampleId(0), CachePolicy::Cache).unwrap();
        assert_eq!(a.bytes, b.bytes);
        assert_eq!(b.bytes, c.bytes);
        assert_eq!(src.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn corrupted_cache_file_refetched_once() {
        let (dir, src, dm, uris) = setup(1, 0);
        let m = dm.ingest(&uris, "n", "o").unwrap();
        let first = dm.fetch(m.dataset_id, SampleId(0), CachePolicy::Cache).unwrap();
        let path = dir.path().join("cache/payloads").join(first.content_hash.to_hex());
        std::fs::write(&path, b"garbage!!").unwrap();
        let again = dm.fetch(m.dataset_id, SampleId(0), CachePolicy::Cache).unwrap();
        assert!(!again.from_cache);
        assert_eq!(again.bytes, b"payload-0");
        assert_eq!(src.calls.load(Ordering::SeqCst), 2);
        let third = dm.fetch(m.dataset_id, SampleId(0), CachePolicy::Cache).unwrap();
        assert!(third.from_cache);
    }

    #[test]
    fn upstream_change_is_a_hash_mismatch() {
        let (_d, src, dm, uris) = setup(1, 0);
        let m = dm.ingest(&uris, "n", "o").unwrap();
        dm.fetch(m.dataset_id, SampleId(0), CachePolicy::NoCache).unwrap();
        src.files.lock().insert(uris[0].clone(), b"changed".to_vec());
        assert!(matches!(
            dm.fetch(m.dataset_id, SampleId(0), CachePolicy::NoCache),
            Err(DataError::HashMismatch { .. })
        ));
    }

    #[test]
    fn fetch_failure_names_uri() {
        let (_d, src, dm, uris) = setup(1, 0);
        let m = dm.ingest(&uris, "n", "o").unwrap();
        src.files.lock().clear();
        match dm.fetch(m.dataset_id, SampleId(0), CachePolicy::Cache) {
            Err(DataError::FetchFailed { uri, .. }) => assert_eq!(uri, uris[0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn concurrent_fetches_coalesce() {
        let (_d, src, dm, uris) = setup(4, 30);
        let m = dm.ingest(&uris, "n", "o").unwrap();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for id in 0..4 {
                        dm.fetch(m.dataset_id, SampleId(id), CachePolicy::Cache).unwrap();
                    }
                });
            }
        });
        assert_eq!(src.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn resubmitted_uris_hit_cache() {
        let (_d, src, dm, uris) = setup(3, 0);
        let a = dm.ingest(&uris, "first", "o").unwrap();
        for id in 0..3 {
            dm.fetch(a.dataset_id, SampleId(id), CachePolicy::Cache).unwrap();
        }
        let b = dm.ingest(&uris, "second", "o").unwrap();
        assert_ne!(a.dataset_id, b.dataset_id);
        for id in 0..3 {
            assert!(dm.fetch(b.dataset_id, SampleId(id), CachePolicy::Cache).unwrap().from_cache);
        }
        assert_eq!(src.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn fetch_once_per_uri_over_random_sequence() {
        use rand::{Rng, SeedableRng};
        let (_d, src, dm, uris) = setup(20, 0);
        let m = dm.ingest(&uris, "n", "o").unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut distinct = HashSet::new();
        for _ in 0..200 {
            let id = rng.random_range(0..20u64);
            distinct.insert(id);
            dm.fetch(m.dataset_id, SampleId(id), CachePolicy::Cache).unwrap();
        }
        assert_eq!(src.calls.load(Ordering::SeqCst), distinct.len());
    }

    #[test]
    fn evicted_payload_is_refilled() {
        let (_d, _src, dm, uris) = setup(3, 0);
        let m = dm.ingest(&uris, "n", "o").unwrap();
        for id in 0..3 {
            dm.fetch(m.dataset_id, SampleId(id), CachePolicy::Cache).unwrap();
        }
        assert_eq!(dm.evict(0).unwrap(), 3);
        let r = dm.fetch(m.dataset_id, SampleId(2), CachePolicy::Cache).unwrap();
        assert!(!r.from_cache);
        assert!(dm.fetch(m.dataset_id, SampleId(2), CachePolicy::Cache).unwrap().from_cache);
    }

    #[test]
    fn manifests_and_hashes_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let src = Arc::new(FakeSource::default());
        src.files.lock().insert("https://h/a".into(), b"A".to_vec());
        let id = {
            let dm = DataManager::with_source(dir.path().join("d"), dir.path().join("c"), src.clone())
                .unwrap();
            let m = dm.ingest(&["https://h/a"], "n", "o").unwrap();
            dm.fetch(m.dataset_id, SampleId(0), CachePolicy::Cache).unwrap();
            m.dataset_id
        };
        let dm = DataManager::with_source(dir.path().join("d"), dir.path().join("c"), src.clone()).unwrap();
        let m = dm.manifest(id).unwrap();
        assert_eq!(m.samples[0].content_hash, Some(ContentHash::of(b"A")));
        assert!(dm.fetch(id, SampleId(0), CachePolicy::Cache).unwrap().from_cache);
        assert_eq!(src.calls.load(Ordering::SeqCst), 1);
    }
}
