//! Retrieval metrics over ranked evidence ids.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Fraction of `gold` found among the first `k` entries of `ranked`.
pub fn recall_at_k(ranked: &[String], gold: &BTreeSet<String>, k: usize) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let hits = ranked.iter().take(k).filter(|id| gold.contains(*id)).count();
    Ok((hits as f64 / gold.len() as f64).min(1.0))
}

/// Precision at each gold hit, summed and divided by the gold size.
pub fn average_precision(ranked: &[String], gold: &BTreeSet<String>) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().enumerate() {
        if gold.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / gold.len() as f64)
}

pub fn mean_average_precision(rankings: &[Vec<String>], golds: &[BTreeSet<String>]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if rankings.len() != golds.len() {
        return Err(Error::dims(&[rankings.len()], &[golds.len()]));
    }
    let aps = rankings
        .iter()
        .zip(golds)
        .map(|(r, g)| average_precision(r, g))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&aps) / aps.len() as f64)
}

/// Sum by recursive halving in index order; used wherever aggregates must not
/// depend on how the work was partitioned.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}

/// Evidence ids ordered by descending score; ties keep input order.
pub fn rank_ids(ids: &[String], scores: &[f64]) -> Vec<String> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.into_iter().map(|i| ids[i].clone()).collect()
}
