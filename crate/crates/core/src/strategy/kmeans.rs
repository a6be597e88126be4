//! K-means sampling and Diverse Mini-Batch (DBAL).
//!
//! Both run the same weighted Lloyd's iteration: k-means++ seeding drawn with
//! probability proportional to `weight * d^2`, weighted-mean centroid updates,
//! and one representative per centroid. Plain k-means uses unit weights.

use rand::Rng;

use crate::model::{EmbeddingMatrix, ProbabilityMatrix, SampleId};

use super::kcenter::euclidean;
use super::{check_budget, rng_for, score_lc, select_top_b, streams, Selection, StrategyError};

pub const KMEANS_MAX_ITER: usize = 100;
/// Stop once the relative inertia improvement falls below this.
pub const KMEANS_REL_TOL: f64 = 1e-4;
/// Lower bound on DBAL sample weights.
pub const WEIGHT_FLOOR: f64 = 1e-12;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Samples an index with probability proportional to `mass`. Returns `None`
/// when the total mass is zero.
fn draw_weighted<R: Rng>(rng: &mut R, mass: &[f64]) -> Option<usize> {
    let total: f64 = mass.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &m) in mass.iter().enumerate() {
        acc += m;
        if acc > target && m > 0.0 {
            return Some(i);
        }
    }
    mass.iter().rposition(|&m| m > 0.0)
}

struct Clustering {
    centroids: Vec<Vec<f64>>,
}

/// Weighted k-means over `points` (already in ascending-id order).
fn weighted_kmeans(points: &[&[f64]], weights: &[f64], k: usize, seed: u64) -> Clustering {
    let n = points.len();
    let mut rng = rng_for(seed, streams::KMEANS_INIT);

    // k-means++ seeding.
    let mut chosen = vec![false; n];
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = draw_weighted(&mut rng, weights).unwrap_or(0);
    chosen[first] = true;
    centroids.push(points[first].to_vec());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mass: Vec<f64> = (0..n)
            .map(|i| if chosen[i] { 0.0 } else { weights[i] * d2[i] })
            .collect();
        let next = match draw_weighted(&mut rng, &mass) {
            Some(i) => i,
            None => {
                // Remaining points coincide with centers; pick any unchosen one.
                let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen[next] = true;
        centroids.push(points[next].to_vec());
        let c = centroids.last().expect("just pushed");
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points[i], c));
        }
    }

    // Lloyd's iterations.
    let dim = points.first().map_or(0, |p| p.len());
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut mass = vec![0.0; k];
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest_centroid(p, &centroids);
            inertia += weights[i] * d;
            mass[c] += weights[i];
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += weights[i] * v;
            }
        }
        if prev_inertia.is_finite() {
            let improvement = prev_inertia - inertia;
            if prev_inertia == 0.0 || improvement / prev_inertia < KMEANS_REL_TOL {
                break;
            }
        }
        prev_inertia = inertia;
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if mass[c] > 0.0 {
                for (dst, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *dst = s / mass[c];
                }
            }
        }
    }
    Clustering { centroids }
}

/// Index and squared distance of the closest centroid; ties go to the lower index.
fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Clusters `embeds` rows (restricted to `positions`) with the given weights
/// and returns one representative per centroid.
///
/// Centroid `c` takes the nearest sample not already taken by centroids
/// `0..c` (ties by smaller id). Its score is the total weight of the samples
/// assigned to it.
fn cluster_and_pick(
    embeds: &EmbeddingMatrix,
    positions: &[usize],
    raw_weights: &[f64],
    k: usize,
    seed: u64,
) -> Selection {
    // Ascending-id order so the seeded draw is independent of row order.
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by_key(|&i| embeds.row_ids()[positions[i]]);
    let points: Vec<&[f64]> = order.iter().map(|&i| embeds.row(positions[i])).collect();
    let ids: Vec<SampleId> = order.iter().map(|&i| embeds.row_ids()[positions[i]]).collect();
    let weights: Vec<f64> = order.iter().map(|&i| raw_weights[i]).collect();

    if k == 0 {
        return Selection {
            ids: Vec::new(),
            scores: Vec::new(),
        };
    }
    let clustering = weighted_kmeans(&points, &weights, k, seed);
    let mut cluster_mass = vec![0.0; k];
    for (i, p) in points.iter().enumerate() {
        cluster_mass[nearest_centroid(p, &clustering.centroids).0] += weights[i];
    }

    let mut taken = vec![false; points.len()];
    let mut selection = Selection {
        ids: Vec::with_capacity(k),
        scores: Vec::with_capacity(k),
    };
    for (c, centroid) in clustering.centroids.iter().enumerate() {
        // Points are in ascending-id order, so strict < keeps the smaller id on ties.
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = euclidean(p, centroid);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k never exceeds the number of points");
        taken[i] = true;
        selection.ids.push(ids[i]);
        selection.scores.push(cluster_mass[c]);
    }
    selection
}

/// K-means sampling: `k = budget` clusters, the sample nearest each centroid.
pub fn select_kmeans(
    embeds: &EmbeddingMatrix,
    budget: usize,
    seed: u64,
) -> Result<Selection, StrategyError> {
    check_budget(budget, embeds.rows())?;
    let positions: Vec<usize> = (0..embeds.rows()).collect();
    let weights = vec![1.0; positions.len()];
    Ok(cluster_and_pick(embeds, &positions, &weights, budget, seed))
}

/// Diverse mini-batch: keep the `beta * budget` least-confident samples, then
/// run LC-weighted k-means with `k = budget` over them.
///
/// Weights are floored at [`WEIGHT_FLOOR`] and divided by their maximum, which
/// leaves the clustering unchanged but makes uniform weights exactly 1.0.
pub fn select_dbal(
    probs: &ProbabilityMatrix,
    embeds: &EmbeddingMatrix,
    budget: usize,
    beta: u32,
    seed: u64,
) -> Result<Selection, StrategyError> {
    if beta == 0 {
        return Err(StrategyError::InvalidParameter("DBAL beta must be >= 1".into()));
    }
    if probs.row_ids() != embeds.row_ids() {
        let row = probs
            .row_ids()
            .iter()
            .zip(embeds.row_ids())
            .position(|(a, b)| a != b)
            .unwrap_or(probs.rows().min(embeds.rows()));
        return Err(StrategyError::RowMisalignment { row });
    }
    check_budget(budget, probs.rows())?;
    let lc = score_lc(probs)?;
    let keep = (beta as usize).saturating_mul(budget).min(probs.rows());
    let top = select_top_b(&lc, probs.row_ids(), keep)?;

    // Row position of every sample id.
    let pos_of: std::collections::HashMap<SampleId, usize> = probs
        .row_ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let positions: Vec<usize> = top.ids.iter().map(|id| pos_of[id]).collect();
    let floored: Vec<f64> = positions.iter().map(|&p| lc[p].max(WEIGHT_FLOOR)).collect();
    let max = floored.iter().copied().fold(WEIGHT_FLOOR, f64::max);
    let weights: Vec<f64> = floored.iter().map(|w| w / max).collect();
    Ok(cluster_and_pick(embeds, &positions, &weights, budget, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn matrix(points: &[Vec<f64>]) -> EmbeddingMatrix {
        let ids = (0..points.len() as u64).map(SampleId).collect();
        EmbeddingMatrix::from_rows(points, ids).unwrap()
    }

    fn two_blobs() -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for i in 0..5 {
            pts.push(vec![0.1 * i as f64, 0.05 * i as f64]);
        }
        for i in 0..5 {
            pts.push(vec![100.0 + 0.1 * i as f64, 100.0 - 0.05 * i as f64]);
        }
        pts
    }

    #[test]
    fn one_pick_per_separated_cluster() {
        let pts = two_blobs();
        let m = matrix(&pts);
        for seed in 0..20 {
            let sel = select_kmeans(&m, 2, seed).unwrap();
            // Brute-force membership: a point is in blob A iff it is closer to
            // the origin than to (100, 100).
            let in_a = |id: SampleId| {
                let p = &pts[id.index()];
                euclidean(p, &[0.0, 0.0]) < euclidean(p, &[100.0, 100.0])
            };
            let a = sel.ids.iter().filter(|&&id| in_a(id)).count();
            assert_eq!(a, 1, "seed {seed}: {:?}", sel.ids);
        }
    }

    #[test]
    fn budget_equal_to_rows_selects_everything() {
        let m = matrix(&two_blobs());
        let sel = select_kmeans(&m, 10, 3).unwrap();
        assert_eq!(sel.sorted_ids(), (0..10).map(SampleId).collect::<Vec<_>>());
    }

    #[test]
    fn duplicate_points_still_yield_distinct_ids() {
        let m = matrix(&vec![vec![1.0, 1.0]; 6]);
        let sel = select_kmeans(&m, 4, 0).unwrap();
        assert_eq!(sel.sorted_ids(), (0..4).map(SampleId).collect::<Vec<_>>());
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..60)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let m = matrix(&pts);
        assert_eq!(select_kmeans(&m, 6, 11).unwrap(), select_kmeans(&m, 6, 11).unwrap());
    }

    fn random_probs(n: usize, c: usize, seed: u64) -> ProbabilityMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        ProbabilityMatrix::from_rows(&rows, (0..n as u64).map(SampleId).collect()).unwrap()
    }

    #[test]
    fn dbal_beta_one_returns_top_lc() {
        let probs = random_probs(30, 4, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let emb = matrix(&pts);
        let sel = select_dbal(&probs, &emb, 5, 1, 9).unwrap();
        let top = select_top_b(&score_lc(&probs).unwrap(), probs.row_ids(), 5).unwrap();
        assert_eq!(sel.sorted_ids(), top.sorted_ids());
    }

    #[test]
    fn dbal_uniform_confidence_matches_kmeans_on_prefilter() {
        let n = 24;
        let uniform = vec![vec![0.25; 4]; n];
        let probs = ProbabilityMatrix::from_rows(&uniform, (0..n as u64).map(SampleId).collect()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let emb = matrix(&pts);
        let (budget, beta, seed) = (3, 2, 17);
        let dbal = select_dbal(&probs, &emb, budget, beta, seed).unwrap();
        // Equal scores prefilter the smallest ids.
        let prefiltered: Vec<usize> = (0..budget * beta as usize).collect();
        let km = select_kmeans(&emb.select_rows(&prefiltered), budget, seed).unwrap();
        assert_eq!(dbal.ids, km.ids);
    }

    #[test]
    fn dbal_selection_within_lc_prefilter() {
        let probs = random_probs(50, 3, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let emb = matrix(&pts);
        let sel = select_dbal(&probs, &emb, 5, 3, 0).unwrap();
        // Brute-force top-15 by LC.
        let lc: Vec<f64> = probs
            .iter_rows()
            .map(|r| 1.0 - r.iter().copied().fold(0.0, f64::max))
            .collect();
        let mut order: Vec<usize> = (0..50).collect();
        order.sort_by(|&a, &b| lc[b].partial_cmp(&lc[a]).unwrap().then(a.cmp(&b)));
        let top15: Vec<SampleId> = order[..15].iter().map(|&i| SampleId(i as u64)).collect();
        assert_eq!(sel.len(), 5);
        assert!(sel.ids.iter().all(|id| top15.contains(id)));
    }

    #[test]
    fn dbal_validates_inputs() {
        let probs = random_probs(4, 2, 0);
        let emb = matrix(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        assert!(matches!(
            select_dbal(&probs, &emb, 1, 0, 0),
            Err(StrategyError::InvalidParameter(_))
        ));
        assert_eq!(
            select_dbal(&probs, &emb, 5, 2, 0),
            Err(StrategyError::BudgetExceedsPool { budget: 5, pool: 4 })
        );
        let short = matrix(&[vec![0.0], vec![1.0]]);
        assert!(matches!(
            select_dbal(&probs, &short, 1, 2, 0),
            Err(StrategyError::RowMisalignment { .. })
        ));
    }
}
