//! Content-addressed payload cache plus a model-versioned inference cache.
//!
//! Layout under the cache directory:
//!
//! ```text
//! payloads/<hash>              raw payload bytes
//! index.json                   payload entries and the uri -> hash map
//! inference/<version>.json     cached model outputs keyed by payload hash
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! crash never leaves a half-written file behind. The index is re-validated
//! against the payload directory on open.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::model::{check_simplex_row, now_utc, ContentHash};

use super::DataError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub content_hash: ContentHash,
    /// Relative to the cache directory.
    pub payload_path: String,
    pub size_bytes: u64,
    #[serde(default)]
    pub prob_row: Option<Vec<f64>>,
    #[serde(default)]
    pub embed_row: Option<Vec<f64>>,
    pub last_access: DateTime<Utc>,
    /// Monotonic access counter; orders entries for LRU eviction.
    #[serde(default)]
    pub access_seq: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct CacheIndex {
    entries: BTreeMap<ContentHash, CacheEntry>,
    uris: BTreeMap<String, ContentHash>,
    #[serde(default)]
    next_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRow {
    pub prob_row: Vec<f64>,
    pub embed_row: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct InferenceFile {
    model_version: String,
    rows: BTreeMap<ContentHash, InferenceRow>,
}

/// What re-validation found when the index was loaded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IndexCheck {
    pub kept: usize,
    pub dropped: Vec<ContentHash>,
}

pub struct Cache {
    dir: PathBuf,
    index: Mutex<(CacheIndex, bool)>,
    inference: Mutex<HashMap<String, InferenceFile>>,
    last_check: IndexCheck,
}

/// Writes via a synced temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn version_file_name(version: &str) -> String {
    let plain = !version.is_empty()
        && !version.starts_with('.')
        && version
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if plain {
        format!("{version}.json")
    } else {
        format!("x-{}.json", hex::encode(version.as_bytes()))
    }
}

impl Cache {
    /// Opens (or creates) a cache rooted at `dir`, dropping index entries
    /// whose payload file is missing or has the wrong size.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, DataError> {
        let dir = dir.into();
        std::fs::create_dir_all(dir.join("payloads"))?;
        std::fs::create_dir_all(dir.join("inference"))?;
        let index_path = dir.join("index.json");
        let mut index: CacheIndex = if index_path.exists() {
            let raw = std::fs::read(&index_path)?;
            serde_json::from_slice(&raw).map_err(|e| DataError::CorruptIndex(e.to_string()))?
        } else {
            CacheIndex::default()
        };
        let mut check = IndexCheck::default();
        index.entries.retain(|hash, entry| {
            let ok = std::fs::metadata(dir.join(&entry.payload_path))
                .map(|m| m.is_file() && m.len() == entry.size_bytes)
                .unwrap_or(false);
            if ok {
                check.kept += 1;
            } else {
                check.dropped.push(*hash);
            }
            ok
        });
        let dirty = !check.dropped.is_empty();
        Ok(Self {
            dir,
            index: Mutex::new((index, dirty)),
            inference: Mutex::new(HashMap::new()),
            last_check: check,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Result of the validation pass run by [`Cache::open`].
    pub fn open_check(&self) -> &IndexCheck {
        &self.last_check
    }

    pub fn hash_for_uri(&self, uri: &str) -> Option<ContentHash> {
        self.index.lock().0.uris.get(uri).copied()
    }

    pub fn entry(&self, hash: &ContentHash) -> Option<CacheEntry> {
        self.index.lock().0.entries.get(hash).cloned()
    }

    /// Entry view with the inference rows cached for `model_version` filled in.
    pub fn entry_for_model(&self, hash: &ContentHash, model_version: &str) -> Option<CacheEntry> {
        let mut entry = self.entry(hash)?;
        if let Some(row) = self.get_inference(hash, model_version) {
            entry.prob_row = Some(row.prob_row);
            entry.embed_row = Some(row.embed_row);
        }
        Some(entry)
    }

    pub fn len(&self) -> usize {
        self.index.lock().0.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_bytes(&self) -> u64 {
        self.index.lock().0.entries.values().map(|e| e.size_bytes).sum()
    }

    /// Reads and verifies a cached payload. `Ok(None)` means not cached;
    /// `Err(HashMismatch)` means the file was corrupt and has been evicted.
    pub fn read_payload(&self, hash: &ContentHash) -> Result<Option<Vec<u8>>, DataError> {
        let path = {
            let mut guard = self.index.lock();
            let (index, dirty) = &mut *guard;
            let seq = index.next_seq;
            match index.entries.get_mut(hash) {
                Some(entry) => {
                    entry.last_access = now_utc();
                    entry.access_seq = seq;
                    index.next_seq += 1;
                    *dirty = true;
                    self.dir.join(&entry.payload_path)
                }
                None => return Ok(None),
            }
        };
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(_) => {
                self.remove_payload(hash);
                return Ok(None);
            }
        };
        if ContentHash::of(&bytes) != *hash {
            self.remove_payload(hash);
            return Err(DataError::HashMismatch {
                uri: path.display().to_string(),
            });
        }
        Ok(Some(bytes))
    }

    /// Stores a payload under its hash and maps `uri` to it.
    pub fn store_payload(&self, uri: &str, bytes: &[u8]) -> Result<ContentHash, DataError> {
        let hash = ContentHash::of(bytes);
        let rel = format!("payloads/{}", hash.to_hex());
        let path = self.dir.join(&rel);
        let present = self.index.lock().0.entries.contains_key(&hash) && path.exists();
        if !present {
            write_atomic(&path, bytes).map_err(|e| DataError::CacheWriteFailed(e.to_string()))?;
        }
        let mut guard = self.index.lock();
        let (index, dirty) = &mut *guard;
        let seq = index.next_seq;
        index.next_seq += 1;
        index.entries.insert(
            hash,
            CacheEntry {
                content_hash: hash,
                payload_path: rel,
                size_bytes: bytes.len() as u64,
                prob_row: None,
                embed_row: None,
                last_access: now_utc(),
                access_seq: seq,
            },
        );
        index.uris.insert(uri.to_string(), hash);
        *dirty = true;
        Ok(hash)
    }

    /// Records the uri -> hash mapping without storing bytes.
    pub fn remember_uri(&self, uri: &str, hash: ContentHash) {
        let mut guard = self.index.lock();
        if guard.0.uris.insert(uri.to_string(), hash) != Some(hash) {
            guard.1 = true;
        }
    }

    fn remove_payload(&self, hash: &ContentHash) {
        let mut guard = self.index.lock();
        if let Some(entry) = guard.0.entries.remove(hash) {
            let _ = std::fs::remove_file(self.dir.join(entry.payload_path));
            guard.1 = true;
        }
    }

    /// Drops least-recently-accessed payloads until the cache holds at most
    /// `max_bytes`. Inference rows are kept. Returns the number evicted.
    pub fn evict(&self, max_bytes: u64) -> usize {
        let victims: Vec<ContentHash> = {
            let guard = self.index.lock();
            let mut total: u64 = guard.0.entries.values().map(|e| e.size_bytes).sum();
            let mut by_age: Vec<&CacheEntry> = guard.0.entries.values().collect();
            by_age.sort_by_key(|e| e.access_seq);
            let mut out = Vec::new();
            for e in by_age {
                if total <= max_bytes {
                    break;
                }
                total -= e.size_bytes;
                out.push(e.content_hash);
            }
            out
        };
        for h in &victims {
            self.remove_payload(h);
        }
        victims.len()
    }

    /// Persists the index if it changed.
    pub fn flush(&self) -> Result<(), DataError> {
        let mut guard = self.index.lock();
        if !guard.1 {
            return Ok(());
        }
        let json = serde_json::to_vec_pretty(&guard.0).expect("index serializes");
        write_atomic(&self.dir.join("index.json"), &json)
            .map_err(|e| DataError::CacheWriteFailed(e.to_string()))?;
        guard.1 = false;
        Ok(())
    }

    fn inference_path(&self, model_version: &str) -> PathBuf {
        self.dir.join("inference").join(version_file_name(model_version))
    }

    fn with_inference<T>(
        &self,
        model_version: &str,
        f: impl FnOnce(&mut InferenceFile) -> T,
    ) -> Result<T, DataError> {
        let mut tables = self.inference.lock();
        if !tables.contains_key(model_version) {
            let path = self.inference_path(model_version);
            let table = match std::fs::read(&path) {
                Ok(raw) => serde_json::from_slice(&raw)
                    .map_err(|e| DataError::CorruptIndex(format!("{}: {e}", path.display())))?,
                Err(_) => InferenceFile {
                    model_version: model_version.to_string(),
                    rows: BTreeMap::new(),
                },
            };
            tables.insert(model_version.to_string(), table);
        }
        Ok(f(tables.get_mut(model_version).expect("inserted above")))
    }

    /// Cached model outputs for `(hash, model_version)`; a version mismatch is a miss.
    pub fn get_inference(&self, hash: &ContentHash, model_version: &str) -> Option<InferenceRow> {
        self.with_inference(model_version, |t| t.rows.get(hash).cloned())
            .ok()
            .flatten()
    }

    pub fn put_inference(
        &self,
        hash: ContentHash,
        model_version: &str,
        prob_row: Vec<f64>,
        embed_row: Vec<f64>,
    ) -> Result<(), DataError> {
        self.put_inference_many(model_version, vec![(hash, InferenceRow { prob_row, embed_row })])
    }

    /// Inserts many rows with a single durable write. Rows overwrite earlier
    /// entries for the same hash.
    pub fn put_inference_many(
        &self,
        model_version: &str,
        rows: Vec<(ContentHash, InferenceRow)>,
    ) -> Result<(), DataError> {
        for (i, (_, row)) in rows.iter().enumerate() {
            check_simplex_row(i, &row.prob_row).map_err(|e| DataError::MalformedRow(e.to_string()))?;
            if row.embed_row.iter().any(|v| !v.is_finite()) {
                return Err(DataError::MalformedRow(format!("row {i}: non-finite embedding")));
            }
        }
        if rows.is_empty() {
            return Ok(());
        }
        let path = self.inference_path(model_version);
        let json = self.with_inference(model_version, |t| {
            t.rows.extend(rows);
            serde_json::to_vec(t).expect("inference table serializes")
        })?;
        write_atomic(&path, &json).map_err(|e| DataError::CacheWriteFailed(e.to_string()))
    }
}

impl Drop for Cache {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::warn!("failed to flush cache index: {e}");
        }
    }
}
