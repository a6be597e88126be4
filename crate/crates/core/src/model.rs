//! Shared domain types: sample identifiers, manifests, model-output matrices,
//! queries and reports.
//!
//! Everything here is plain data. Matrix types validate their invariants on
//! construction (and on deserialization), so downstream code can rely on them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

/// URI schemes a sample may live under.
pub const SUPPORTED_SCHEMES: &[&str] = &["file", "http", "https", "s3", "ftp"];

/// Simplex tolerance for probability rows.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Dense per-dataset sample index, assigned from 0 in ingestion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub u64);

impl SampleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! uuid_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Uuid);

        impl $name {
            pub fn random() -> Self {
                Self(Uuid::new_v4())
            }

            pub fn nil() -> Self {
                Self(Uuid::nil())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }

        impl FromStr for $name {
            type Err = uuid::Error;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Uuid::parse_str(s).map(Self)
            }
        }
    };
}

uuid_newtype!(
    /// Random 128-bit dataset identity.
    DatasetId
);
uuid_newtype!(
    /// Random 128-bit job identity.
    JobId
);

/// SHA-256 digest of a payload. Serialized as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for ContentHash {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|e| e.to_string())?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| "content hash must be 32 bytes".to_string())?;
        Ok(Self(arr))
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UriError {
    #[error("empty URI")]
    Empty,
    #[error("unparseable URI {uri:?}: {reason}")]
    Unparseable { uri: String, reason: String },
    #[error("unsupported scheme {scheme:?} in {uri:?}")]
    UnsupportedScheme { uri: String, scheme: String },
}

/// Parses `uri` and checks its scheme against [`SUPPORTED_SCHEMES`].
pub fn parse_sample_uri(uri: &str) -> Result<url::Url, UriError> {
    if uri.is_empty() {
        return Err(UriError::Empty);
    }
    let parsed = url::Url::parse(uri).map_err(|e| UriError::Unparseable {
        uri: uri.to_string(),
        reason: e.to_string(),
    })?;
    if !SUPPORTED_SCHEMES.contains(&parsed.scheme()) {
        return Err(UriError::UnsupportedScheme {
            uri: uri.to_string(),
            scheme: parsed.scheme().to_string(),
        });
    }
    Ok(parsed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: SampleId,
    pub uri: String,
    #[serde(default)]
    pub content_hash: Option<ContentHash>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: DatasetId,
    pub name: String,
    pub owner: String,
    pub created_at: DateTime<Utc>,
    pub samples: Vec<SampleRef>,
}

impl DatasetManifest {
    /// Builds a manifest assigning dense ids in input order. Does not validate.
    pub fn from_uris<I, S>(uris: I, name: impl Into<String>, owner: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let samples = uris
            .into_iter()
            .enumerate()
            .map(|(i, uri)| SampleRef {
                id: SampleId(i as u64),
                uri: uri.into(),
                content_hash: None,
            })
            .collect();
        Self {
            dataset_id: DatasetId::random(),
            name: name.into(),
            owner: owner.into(),
            created_at: now_utc(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: SampleId) -> Option<&SampleRef> {
        self.samples.get(id.index()).filter(|s| s.id == id)
    }
}

/// One invariant violation reported by [`validate_manifest`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestViolation {
    #[error("uri {uri:?} appears at positions {first} and {duplicate}")]
    DuplicateUri {
        uri: String,
        first: usize,
        duplicate: usize,
    },
    #[error("sample at position {position} has id {id}")]
    IdPositionMismatch { position: usize, id: SampleId },
    #[error("sample at position {position}: {reason}")]
    InvalidUri { position: usize, reason: String },
}

/// Returns every manifest invariant violation, or `Ok(())`.
pub fn validate_manifest(manifest: &DatasetManifest) -> Result<(), Vec<ManifestViolation>> {
    let mut violations = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::with_capacity(manifest.samples.len());
    for (position, sample) in manifest.samples.iter().enumerate() {
        if sample.id.0 != position as u64 {
            violations.push(ManifestViolation::IdPositionMismatch {
                position,
                id: sample.id,
            });
        }
        if let Err(e) = parse_sample_uri(&sample.uri) {
            violations.push(ManifestViolation::InvalidUri {
                position,
                reason: e.to_string(),
            });
        }
        if let Some(&first) = seen.get(sample.uri.as_str()) {
            violations.push(ManifestViolation::DuplicateUri {
                uri: sample.uri.clone(),
                first,
                duplicate: position,
            });
        } else {
            seen.insert(&sample.uri, position);
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatrixError {
    #[error("data length {len} does not match {rows}x{cols}")]
    ShapeMismatch { len: usize, rows: usize, cols: usize },
    #[error("row_ids has {ids} entries for {rows} rows")]
    RowIdCount { ids: usize, rows: usize },
    #[error("need at least {min} columns, got {cols}")]
    TooFewColumns { cols: usize, min: usize },
    #[error("row {row} entry {value} outside [0, 1]")]
    OutOfRange { row: usize, value: f64 },
    #[error("row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("ragged rows: row {row} has {len} entries, expected {expected}")]
    Ragged { row: usize, len: usize, expected: usize },
}

/// Checks that `row` is a probability vector.
pub fn check_simplex_row(row_index: usize, row: &[f64]) -> Result<(), MatrixError> {
    let mut sum = 0.0;
    for &p in row {
        if !p.is_finite() {
            return Err(MatrixError::NonFinite { row: row_index });
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(MatrixError::OutOfRange {
                row: row_index,
                value: p,
            });
        }
        sum += p;
    }
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(MatrixError::NotNormalized { row: row_index, sum });
    }
    Ok(())
}

fn flatten(rows: &[Vec<f64>]) -> Result<(usize, Vec<f64>), MatrixError> {
    let cols = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * cols);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(MatrixError::Ragged {
                row: i,
                len: r.len(),
                expected: cols,
            });
        }
        data.extend_from_slice(r);
    }
    Ok((cols, data))
}

/// Per-sample class probabilities, row-major, rows aligned to `row_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProbabilityMatrix")]
pub struct ProbabilityMatrix {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
    row_ids: Vec<SampleId>,
}

#[derive(Deserialize)]
struct RawProbabilityMatrix {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
    row_ids: Vec<SampleId>,
}

impl TryFrom<RawProbabilityMatrix> for ProbabilityMatrix {
    type Error = MatrixError;

    fn try_from(raw: RawProbabilityMatrix) -> Result<Self, Self::Error> {
        if raw.rows != raw.row_ids.len() {
            return Err(MatrixError::RowIdCount {
                ids: raw.row_ids.len(),
                rows: raw.rows,
            });
        }
        Self::new(raw.classes, raw.data, raw.row_ids)
    }
}

impl ProbabilityMatrix {
    pub fn new(classes: usize, data: Vec<f64>, row_ids: Vec<SampleId>) -> Result<Self, MatrixError> {
        if classes < 2 {
            return Err(MatrixError::TooFewColumns { cols: classes, min: 2 });
        }
        let rows = row_ids.len();
        if data.len() != rows * classes {
            return Err(MatrixError::ShapeMismatch {
                len: data.len(),
                rows,
                cols: classes,
            });
        }
        for (i, row) in data.chunks_exact(classes).enumerate() {
            check_simplex_row(i, row)?;
        }
        Ok(Self {
            rows,
            classes,
            data,
            row_ids,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], row_ids: Vec<SampleId>) -> Result<Self, MatrixError> {
        if rows.len() != row_ids.len() {
            return Err(MatrixError::RowIdCount {
                ids: row_ids.len(),
                rows: rows.len(),
            });
        }
        let (cols, data) = flatten(rows)?;
        Self::new(cols, data, row_ids)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row_ids(&self) -> &[SampleId] {
        &self.row_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.classes)
    }

    /// Rebuilds the matrix keeping only the given row positions, in that order.
    pub fn select_rows(&self, positions: &[usize]) -> Self {
        let mut data = Vec::with_capacity(positions.len() * self.classes);
        let mut row_ids = Vec::with_capacity(positions.len());
        for &p in positions {
            data.extend_from_slice(self.row(p));
            row_ids.push(self.row_ids[p]);
        }
        Self {
            rows: positions.len(),
            classes: self.classes,
            data,
            row_ids,
        }
    }
}

/// Per-sample feature embeddings, row-major, rows aligned to `row_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEmbeddingMatrix")]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    row_ids: Vec<SampleId>,
}

#[derive(Deserialize)]
struct RawEmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    row_ids: Vec<SampleId>,
}

impl TryFrom<RawEmbeddingMatrix> for EmbeddingMatrix {
    type Error = MatrixError;

    fn try_from(raw: RawEmbeddingMatrix) -> Result<Self, Self::Error> {
        if raw.rows != raw.row_ids.len() {
            return Err(MatrixError::RowIdCount {
                ids: raw.row_ids.len(),
                rows: raw.rows,
            });
        }
        Self::new(raw.dim, raw.data, raw.row_ids)
    }
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f64>, row_ids: Vec<SampleId>) -> Result<Self, MatrixError> {
        if dim < 1 {
            return Err(MatrixError::TooFewColumns { cols: dim, min: 1 });
        }
        let rows = row_ids.len();
        if data.len() != rows * dim {
            return Err(MatrixError::ShapeMismatch {
                len: data.len(),
                rows,
                cols: dim,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite { row: pos / dim });
        }
        Ok(Self {
            rows,
            dim,
            data,
            row_ids,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            rows: 0,
            dim: dim.max(1),
            data: Vec::new(),
            row_ids: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], row_ids: Vec<SampleId>) -> Result<Self, MatrixError> {
        if rows.len() != row_ids.len() {
            return Err(MatrixError::RowIdCount {
                ids: row_ids.len(),
                rows: rows.len(),
            });
        }
        let (cols, data) = flatten(rows)?;
        Self::new(cols, data, row_ids)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row_ids(&self) -> &[SampleId] {
        &self.row_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select_rows(&self, positions: &[usize]) -> Self {
        let mut data = Vec::with_capacity(positions.len() * self.dim);
        let mut row_ids = Vec::with_capacity(positions.len());
        for &p in positions {
            data.extend_from_slice(self.row(p));
            row_ids.push(self.row_ids[p]);
        }
        Self {
            rows: positions.len(),
            dim: self.dim,
            data,
            row_ids,
        }
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Default DBAL prefilter factor.
pub const DEFAULT_DBAL_BETA: u32 = 10;

/// The built-in selection strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    Random,
    LC,
    MC,
    RC,
    ES,
    KMeans,
    KCG,
    CoreSet,
    DBAL { beta: u32 },
}

/// Accepted spellings for each strategy, canonical name first.
pub const STRATEGY_ALIASES: &[(&str, &[&str])] = &[
    ("Random", &["Random", "RandomSampling"]),
    ("LC", &["LC", "LeastConfidence"]),
    ("MC", &["MC", "MarginConfidence"]),
    ("RC", &["RC", "RatioConfidence"]),
    ("ES", &["ES", "EntropySampling"]),
    ("KMeans", &["KMeans", "KMeansSampling"]),
    ("KCG", &["KCG", "KCenterGreedy"]),
    ("CoreSet", &["CoreSet", "Coreset"]),
    ("DBAL", &["DBAL", "DiverseMiniBatch"]),
];

impl StrategyKind {
    pub const ALL: [StrategyKind; 9] = [
        StrategyKind::Random,
        StrategyKind::LC,
        StrategyKind::MC,
        StrategyKind::RC,
        StrategyKind::ES,
        StrategyKind::KMeans,
        StrategyKind::KCG,
        StrategyKind::CoreSet,
        StrategyKind::DBAL {
            beta: DEFAULT_DBAL_BETA,
        },
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Random => "Random",
            StrategyKind::LC => "LC",
            StrategyKind::MC => "MC",
            StrategyKind::RC => "RC",
            StrategyKind::ES => "ES",
            StrategyKind::KMeans => "KMeans",
            StrategyKind::KCG => "KCG",
            StrategyKind::CoreSet => "CoreSet",
            StrategyKind::DBAL { .. } => "DBAL",
        }
    }

    /// Resolves a name or alias. DBAL gets the default beta.
    pub fn from_alias(name: &str) -> Option<Self> {
        let canonical = STRATEGY_ALIASES
            .iter()
            .find(|(_, aliases)| aliases.contains(&name))
            .map(|(c, _)| *c)?;
        Some(match canonical {
            "Random" => StrategyKind::Random,
            "LC" => StrategyKind::LC,
            "MC" => StrategyKind::MC,
            "RC" => StrategyKind::RC,
            "ES" => StrategyKind::ES,
            "KMeans" => StrategyKind::KMeans,
            "KCG" => StrategyKind::KCG,
            "CoreSet" => StrategyKind::CoreSet,
            _ => StrategyKind::DBAL {
                beta: DEFAULT_DBAL_BETA,
            },
        })
    }

    pub fn alias_list() -> String {
        STRATEGY_ALIASES
            .iter()
            .flat_map(|(_, a)| a.iter().copied())
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn needs_probs(&self) -> bool {
        matches!(
            self,
            StrategyKind::LC
                | StrategyKind::MC
                | StrategyKind::RC
                | StrategyKind::ES
                | StrategyKind::DBAL { .. }
        )
    }

    pub fn needs_embeds(&self) -> bool {
        matches!(
            self,
            StrategyKind::KMeans
                | StrategyKind::KCG
                | StrategyKind::CoreSet
                | StrategyKind::DBAL { .. }
        )
    }

    pub fn needs_labeled_embeds(&self) -> bool {
        matches!(self, StrategyKind::KCG | StrategyKind::CoreSet)
    }

    pub fn needs_model_output(&self) -> bool {
        self.needs_probs() || self.needs_embeds()
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown strategy {name:?}; valid names: {valid}")]
pub struct UnknownStrategy {
    pub name: String,
    pub valid: String,
}

impl FromStr for StrategyKind {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_alias(s).ok_or_else(|| UnknownStrategy {
            name: s.to_string(),
            valid: Self::alias_list(),
        })
    }
}

// Unit strategies serialize as their canonical name; DBAL as {"DBAL": {"beta": n}}.
// A bare "DBAL" string (or alias) deserializes with the default beta.
impl Serialize for StrategyKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            StrategyKind::DBAL { beta } => {
                #[derive(Serialize)]
                struct Beta {
                    beta: u32,
                }
                let mut map = BTreeMap::new();
                map.insert("DBAL", Beta { beta: *beta });
                map.serialize(s)
            }
            other => s.serialize_str(other.name()),
        }
    }
}

impl<'de> Deserialize<'de> for StrategyKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Beta {
            beta: u32,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Dbal(BTreeMap<String, Beta>),
        }
        match Repr::deserialize(d)? {
            Repr::Name(name) => name.parse().map_err(serde::de::Error::custom),
            Repr::Dbal(map) => {
                let mut it = map.into_iter();
                match (it.next(), it.next()) {
                    (Some((name, Beta { beta })), None)
                        if matches!(
                            StrategyKind::from_alias(&name),
                            Some(StrategyKind::DBAL { .. })
                        ) =>
                    {
                        if beta == 0 {
                            return Err(serde::de::Error::custom("DBAL beta must be >= 1"));
                        }
                        Ok(StrategyKind::DBAL { beta })
                    }
                    _ => Err(serde::de::Error::custom(
                        "expected a strategy name or {\"DBAL\": {\"beta\": n}}",
                    )),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ALQuery {
    pub dataset_id: DatasetId,
    pub strategy: StrategyKind,
    pub budget: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub labeled_ids: Vec<SampleId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "code")]
pub enum QueryError {
    #[error("budget must be positive")]
    ZeroBudget,
    #[error("batch size must be positive")]
    ZeroBatchSize,
    #[error("DBAL beta must be positive")]
    ZeroBeta,
    #[error("query targets dataset {query} but manifest is {manifest}")]
    DatasetMismatch { query: DatasetId, manifest: DatasetId },
    #[error("budget {budget} exceeds the {pool} unlabeled samples available")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("labeled id {id} is not in the dataset")]
    UnknownLabeledId { id: SampleId },
    #[error("labeled id {id} listed twice")]
    DuplicateLabeledId { id: SampleId },
}

impl ALQuery {
    /// Checks the query's own invariants against the dataset it targets.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<(), QueryError> {
        if self.budget == 0 {
            return Err(QueryError::ZeroBudget);
        }
        if self.batch_size == 0 {
            return Err(QueryError::ZeroBatchSize);
        }
        if let StrategyKind::DBAL { beta: 0 } = self.strategy {
            return Err(QueryError::ZeroBeta);
        }
        if self.dataset_id != manifest.dataset_id {
            return Err(QueryError::DatasetMismatch {
                query: self.dataset_id,
                manifest: manifest.dataset_id,
            });
        }
        let mut seen = std::collections::HashSet::with_capacity(self.labeled_ids.len());
        for &id in &self.labeled_ids {
            if id.index() >= manifest.len() {
                return Err(QueryError::UnknownLabeledId { id });
            }
            if !seen.insert(id) {
                return Err(QueryError::DuplicateLabeledId { id });
            }
        }
        let pool = manifest.len() - self.labeled_ids.len();
        if self.budget > pool {
            return Err(QueryError::BudgetExceedsPool {
                budget: self.budget,
                pool,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fetch,
    Preprocess,
    Infer,
    Select,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Fetch, Stage::Preprocess, Stage::Infer, Stage::Select];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStat {
    pub items: usize,
    pub busy_time: f64,
    pub idle_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stages: BTreeMap<Stage, StageStat>,
    pub wall_clock: f64,
    pub throughput: f64,
    /// Samples dropped under the skip failure policy.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SampleId>,
}

impl StageMetrics {
    /// Drops everything that depends on timing or on what was already
    /// cached (per-stage counts shrink on a warm cache). Keeps skipped ids.
    pub fn clear_measurements(&mut self) {
        self.stages.clear();
        self.wall_clock = 0.0;
        self.throughput = 0.0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSample {
    pub id: SampleId,
    pub uri: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALReport {
    pub job_id: JobId,
    pub dataset_id: DatasetId,
    pub strategy: StrategyKind,
    pub budget: usize,
    pub selected: Vec<SelectedSample>,
    pub timing: StageMetrics,
    pub completed_at: DateTime<Utc>,
}

impl ALReport {
    pub fn selected_ids(&self) -> Vec<SampleId> {
        self.selected.iter().map(|s| s.id).collect()
    }

    /// Zeroes everything that varies between otherwise identical runs.
    pub fn make_deterministic(&mut self) {
        self.job_id = JobId::nil();
        self.completed_at = DateTime::<Utc>::UNIX_EPOCH;
        self.timing.clear_measurements();
    }
}

/// Current time truncated to whole seconds.
pub fn now_utc() -> DateTime<Utc> {
    Utc::now().trunc_subsecs(0)
}
