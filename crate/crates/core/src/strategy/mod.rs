//! Pool-based selection strategies.
//!
//! Every strategy is a pure function of its [`StrategyInput`]. Ties are always
//! broken in favour of the smaller [`SampleId`], and seeded strategies sort
//! their candidates by id before drawing randomness, so the result depends
//! only on the set of rows, never on their order.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), a counter-based
//! generator. Each consumer uses its own stream of the seeded generator (see
//! [`rng_for`]), so adding a random draw to one strategy never shifts another.

mod kcenter;
mod kmeans;
mod registry;
mod uncertainty;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom as _;
use thiserror::Error;

use crate::model::{EmbeddingMatrix, MatrixError, ProbabilityMatrix, SampleId, StrategyKind};

pub use kcenter::{select_coreset, select_kcenter_greedy};
pub use kmeans::{select_dbal, select_kmeans, KMEANS_MAX_ITER, KMEANS_REL_TOL, WEIGHT_FLOOR};
pub use registry::{Strategy, StrategyRegistry};
pub use uncertainty::{score_es, score_lc, score_mc, score_rc, select_top_b};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("malformed matrix: {0}")]
    MalformedMatrix(#[from] MatrixError),
    #[error("budget {budget} exceeds pool of {pool}")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("embedding dimension mismatch: pool {pool}, labeled {labeled}")]
    DimensionMismatch { pool: usize, labeled: usize },
    #[error("row ids of probs and embeds disagree at row {row}")]
    RowMisalignment { row: usize },
    #[error("strategy {strategy} needs `{field}`")]
    MissingInput {
        strategy: String,
        field: &'static str,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
}

/// Model outputs and budget handed to a strategy.
///
/// `probs`/`embeds` describe the unlabeled pool only; `labeled_embeds` holds
/// the already-labeled samples used as initial centers by k-center methods.
/// `candidates` lets model-free strategies (Random) run without any matrix.
#[derive(Debug, Clone, Default)]
pub struct StrategyInput {
    pub probs: Option<ProbabilityMatrix>,
    pub embeds: Option<EmbeddingMatrix>,
    pub labeled_embeds: Option<EmbeddingMatrix>,
    pub candidates: Option<Vec<SampleId>>,
    pub budget: usize,
    pub seed: u64,
}

impl StrategyInput {
    /// Pool ids from whichever source is present.
    pub fn pool_ids(&self) -> Option<Vec<SampleId>> {
        if let Some(p) = &self.probs {
            Some(p.row_ids().to_vec())
        } else if let Some(e) = &self.embeds {
            Some(e.row_ids().to_vec())
        } else {
            self.candidates.clone()
        }
    }
}

/// Selected ids with their strategy-specific scores, in pick order.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Selection {
    pub ids: Vec<SampleId>,
    pub scores: Vec<f64>,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sorted_ids(&self) -> Vec<SampleId> {
        let mut ids = self.ids.clone();
        ids.sort_unstable();
        ids
    }
}

pub(crate) fn check_budget(budget: usize, pool: usize) -> Result<(), StrategyError> {
    if budget > pool {
        Err(StrategyError::BudgetExceedsPool { budget, pool })
    } else {
        Ok(())
    }
}

/// Stream numbers used to split one seed between consumers.
pub(crate) mod streams {
    pub const RANDOM: u64 = 1;
    pub const KMEANS_INIT: u64 = 2;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform sample of `budget` ids without replacement.
///
/// Runs a partial Fisher-Yates shuffle over the ids sorted ascending. Scores
/// are all zero.
pub fn select_random(
    row_ids: &[SampleId],
    budget: usize,
    seed: u64,
) -> Result<Selection, StrategyError> {
    check_budget(budget, row_ids.len())?;
    let mut ids = row_ids.to_vec();
    ids.sort_unstable();
    let mut rng = rng_for(seed, streams::RANDOM);
    let (picked, _) = ids.partial_shuffle(&mut rng, budget);
    Ok(Selection {
        ids: picked.to_vec(),
        scores: vec![0.0; budget],
    })
}

fn check_aligned(probs: &ProbabilityMatrix, embeds: &EmbeddingMatrix) -> Result<(), StrategyError> {
    if probs.rows() != embeds.rows() {
        return Err(StrategyError::RowMisalignment {
            row: probs.rows().min(embeds.rows()),
        });
    }
    match probs
        .row_ids()
        .iter()
        .zip(embeds.row_ids())
        .position(|(a, b)| a != b)
    {
        Some(row) => Err(StrategyError::RowMisalignment { row }),
        None => Ok(()),
    }
}

/// Dispatches `kind` over `input`.
pub fn run_strategy(kind: StrategyKind, input: &StrategyInput) -> Result<Selection, StrategyError> {
    let missing = |field| StrategyError::MissingInput {
        strategy: kind.name().to_string(),
        field,
    };
    if let (Some(p), Some(e)) = (&input.probs, &input.embeds) {
        check_aligned(p, e)?;
    }
    let probs = || input.probs.as_ref().ok_or_else(|| missing("probs"));
    let embeds = || input.embeds.as_ref().ok_or_else(|| missing("embeds"));
    let labeled = || input.labeled_embeds.as_ref().ok_or_else(|| missing("labeled_embeds"));

    match kind {
        StrategyKind::Random => {
            let ids = input.pool_ids().ok_or_else(|| missing("candidates"))?;
            select_random(&ids, input.budget, input.seed)
        }
        StrategyKind::LC | StrategyKind::MC | StrategyKind::RC | StrategyKind::ES => {
            let p = probs()?;
            let scores = match kind {
                StrategyKind::LC => score_lc(p)?,
                StrategyKind::MC => score_mc(p)?,
                StrategyKind::RC => score_rc(p)?,
                _ => score_es(p)?,
            };
            select_top_b(&scores, p.row_ids(), input.budget)
        }
        StrategyKind::KCG => select_kcenter_greedy(embeds()?, labeled()?, input.budget),
        StrategyKind::CoreSet => select_coreset(embeds()?, labeled()?, input.budget),
        StrategyKind::KMeans => select_kmeans(embeds()?, input.budget, input.seed),
        StrategyKind::DBAL { beta } => {
            select_dbal(probs()?, embeds()?, input.budget, beta, input.seed)
        }
    }
}
