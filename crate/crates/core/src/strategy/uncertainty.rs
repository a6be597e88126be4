//! Uncertainty scores over class-probability rows. Higher is more informative.

use std::cmp::Ordering;

use crate::model::{check_simplex_row, ProbabilityMatrix, SampleId};

use super::{check_budget, Selection, StrategyError};

fn score_rows(
    probs: &ProbabilityMatrix,
    f: impl Fn(&[f64]) -> f64,
) -> Result<Vec<f64>, StrategyError> {
    probs
        .iter_rows()
        .enumerate()
        .map(|(i, row)| {
            check_simplex_row(i, row)?;
            Ok(f(row))
        })
        .collect()
}

/// Largest and second-largest entries of a row with at least two entries.
fn top_two(row: &[f64]) -> (f64, f64) {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in row {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    (first, second)
}

/// Least confidence: `1 - max_c p(c|x)`.
pub fn score_lc(probs: &ProbabilityMatrix) -> Result<Vec<f64>, StrategyError> {
    score_rows(probs, |row| 1.0 - top_two(row).0)
}

/// Margin confidence: `1 - (p_top1 - p_top2)`.
pub fn score_mc(probs: &ProbabilityMatrix) -> Result<Vec<f64>, StrategyError> {
    score_rows(probs, |row| {
        let (a, b) = top_two(row);
        1.0 - (a - b)
    })
}

/// Ratio confidence: `p_top2 / p_top1`.
pub fn score_rc(probs: &ProbabilityMatrix) -> Result<Vec<f64>, StrategyError> {
    // A simplex row always has a positive maximum.
    score_rows(probs, |row| {
        let (a, b) = top_two(row);
        b / a
    })
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn score_es(probs: &ProbabilityMatrix) -> Result<Vec<f64>, StrategyError> {
    score_rows(probs, |row| {
        -row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    })
}

/// The `budget` rows with the largest scores, ordered by descending score,
/// ties broken by ascending id.
pub fn select_top_b(
    scores: &[f64],
    row_ids: &[SampleId],
    budget: usize,
) -> Result<Selection, StrategyError> {
    if scores.len() != row_ids.len() {
        return Err(StrategyError::RowMisalignment {
            row: scores.len().min(row_ids.len()),
        });
    }
    check_budget(budget, scores.len())?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| row_ids[a].cmp(&row_ids[b]))
    };
    if budget < order.len() && budget > 0 {
        order.select_nth_unstable_by(budget - 1, cmp);
        order.truncate(budget);
    }
    order.sort_unstable_by(cmp);
    order.truncate(budget);
    Ok(Selection {
        ids: order.iter().map(|&i| row_ids[i]).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
    })
}
