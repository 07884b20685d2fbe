//! Retrieval metrics over a batch of paired embeddings: recall at K, median
//! rank and their mean, in both query directions. Ranking is purely
//! ordinal — any strictly monotone transform of the scores gives identical
//! results — and ties resolve toward the lower candidate index.

use crate::error::{Result, StgtError};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub r_at: BTreeMap<usize, f64>,
    pub med_r: f64,
    /// mean of R@1, R@5, R@10 when all three are requested
    pub r_mean: f64,
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub v2t: RetrievalResult,
    pub t2v: RetrievalResult,
}

/// Rank (1-based) of the ground-truth candidate `i` for query `i`, given the
/// query's scores against all candidates. A candidate outranks the truth if
/// its score is strictly higher, or equal with a lower index.
fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    let mut rank = 1;
    for (j, &v) in scores.iter().enumerate() {
        if j == truth {
            continue;
        }
        if v > s || (v == s && j < truth) {
            rank += 1;
        }
    }
    rank
}

fn summarize(ranks: Vec<usize>, ks: &[usize]) -> RetrievalResult {
    let b = ranks.len();
    let mut r_at = BTreeMap::new();
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        r_at.insert(k, hits as f64 / b as f64);
    }
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let med_r = if b % 2 == 1 {
        sorted[b / 2] as f64
    } else {
        (sorted[b / 2 - 1] + sorted[b / 2]) as f64 / 2.0
    };
    let r_mean = match (r_at.get(&1), r_at.get(&5), r_at.get(&10)) {
        (Some(a), Some(b), Some(c)) => (a + b + c) / 3.0,
        _ => {
            let vals: Vec<f64> = r_at.values().copied().collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        }
    };
    RetrievalResult {
        r_at,
        med_r,
        r_mean,
        ranks,
    }
}

/// Both retrieval directions for a batch of paired rows: video-to-text uses
/// each video row as the query over all text rows, and vice versa.
pub fn evaluate_retrieval(
    video: &Tensor<f64>,
    text: &Tensor<f64>,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if video.rows() != text.rows() || video.cols() != text.cols() {
        return Err(StgtError::ShapeMismatch {
            op: "evaluate_retrieval",
            left: video.shape().to_vec(),
            right: text.shape().to_vec(),
        });
    }
    let b = video.rows();
    if b == 0 {
        return Err(StgtError::Config("empty batch".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut v2t_ranks = Vec::with_capacity(b);
    let mut t2v_ranks = Vec::with_capacity(b);
    for i in 0..b {
        let scores_v2t: Vec<f64> = (0..b).map(|j| dot(video.row(i), text.row(j))).collect();
        v2t_ranks.push(rank_of(&scores_v2t, i));
        let scores_t2v: Vec<f64> = (0..b).map(|j| dot(text.row(i), video.row(j))).collect();
        t2v_ranks.push(rank_of(&scores_t2v, i));
    }
    Ok(RetrievalReport {
        v2t: summarize(v2t_ranks, ks),
        t2v: summarize(t2v_ranks, ks),
    })
}
