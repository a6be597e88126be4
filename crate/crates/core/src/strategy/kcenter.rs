//! Greedy k-center selection (the 2-approximation shared by KCG and Core-set).

use crate::model::EmbeddingMatrix;

use super::{check_budget, Selection, StrategyError};

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Repeatedly picks the pool point farthest from its nearest center, starting
/// from the labeled set.
///
/// Each score is the picked point's distance to its nearest center at pick
/// time, so scores are non-increasing. With no labeled points the first pick
/// is the smallest id; its score is then the largest distance from it to any
/// other pool point (the covering radius it leaves behind).
pub fn select_kcenter_greedy(
    embeds: &EmbeddingMatrix,
    labeled_embeds: &EmbeddingMatrix,
    budget: usize,
) -> Result<Selection, StrategyError> {
    if labeled_embeds.rows() > 0 && labeled_embeds.dim() != embeds.dim() {
        return Err(StrategyError::DimensionMismatch {
            pool: embeds.dim(),
            labeled: labeled_embeds.dim(),
        });
    }
    let n = embeds.rows();
    check_budget(budget, n)?;
    let ids = embeds.row_ids();

    let mut nearest = vec![f64::INFINITY; n];
    for c in 0..labeled_embeds.rows() {
        let center = labeled_embeds.row(c);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(euclidean(embeds.row(i), center));
        }
    }
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(budget);
    let mut scores = Vec::with_capacity(budget);

    for _ in 0..budget {
        let best = (0..n)
            .filter(|&i| !taken[i])
            .max_by(|&a, &b| {
                nearest[a]
                    .total_cmp(&nearest[b])
                    .then_with(|| ids[b].cmp(&ids[a]))
            })
            .expect("budget checked against pool size");
        taken[best] = true;
        let before = nearest[best];
        let center = embeds.row(best);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(euclidean(embeds.row(i), center));
        }
        let score = if before.is_finite() {
            before
        } else {
            // First center with nothing to measure against.
            (0..n)
                .filter(|&i| !taken[i])
                .map(|i| nearest[i])
                .fold(0.0, f64::max)
        };
        picked.push(ids[best]);
        scores.push(score);
    }
    Ok(Selection {
        ids: picked,
        scores,
    })
}

/// Core-set selection over model embeddings; same greedy kernel as
/// [`select_kcenter_greedy`].
pub fn select_coreset(
    embeds: &EmbeddingMatrix,
    labeled_embeds: &EmbeddingMatrix,
    budget: usize,
) -> Result<Selection, StrategyError> {
    select_kcenter_greedy(embeds, labeled_embeds, budget)
}
