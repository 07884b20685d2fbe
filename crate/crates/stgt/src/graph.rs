//! Spatio-temporal graph construction over local tokens: pairwise similarity,
//! the intra-frame / adjacent-frame mask, and the thresholded adjacency.

use crate::error::{Result, StgtError};
use crate::tensor::{l2_normalize_rows, matmul, BitMatrix, Scalar, Tensor};
use std::io::Write;

/// Graph over all `m * t` local tokens. Adjacency is kept both as a dense
/// bit-matrix and as per-row neighbor lists; the two must agree exactly.
#[derive(Debug, Clone)]
pub struct SpatioTemporalGraph<T = f64> {
    pub node_count: usize,
    pub adjacency: BitMatrix,
    /// Sparse view of `adjacency`: ascending neighbor indices per row.
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Tensor<T>,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegreeStats {
    pub mean_degree: f64,
    pub density: f64,
    pub isolated_nodes: usize,
}

/// Pairwise token similarity. With `normalize` set (the default everywhere in
/// this crate) rows are L2-normalized first so entries are cosines in
/// `[-1, 1]` with an exact 1.0 diagonal for nonzero rows; otherwise the raw
/// Gram matrix `X X^T` is returned.
pub fn token_similarity<T: Scalar>(x_l: &Tensor<T>, normalize: bool) -> Tensor<T> {
    let x = if normalize {
        l2_normalize_rows(x_l)
    } else {
        x_l.clone()
    };
    let mut w = matmul(&x, &x.transpose()).expect("square by construction");
    if normalize {
        let n = x.rows();
        let one = T::one();
        for i in 0..n {
            for j in 0..n {
                let v = w.at(i, j);
                if v > one {
                    w.set(i, j, one);
                } else if v < -one {
                    w.set(i, j, -one);
                }
            }
            if crate::tensor::l2_norm(x_l.row(i)) > T::zero() {
                w.set(i, i, one);
            }
        }
    }
    w
}

/// Mask allowing edges only within a frame or between adjacent frames.
/// Nodes are frame-major: `frame(k) = k / t`.
pub fn temporal_mask(m: usize, t: usize) -> BitMatrix {
    let n = m * t;
    let mut mask = BitMatrix::zeros(n, n);
    for i in 0..n {
        let fi = i / t;
        for j in 0..n {
            let fj = j / t;
            if fi.abs_diff(fj) <= 1 {
                mask.set(i, j, true);
            }
        }
    }
    mask
}

/// Threshold the masked similarity: an edge exists iff the mask allows it and
/// the weight is at least `threshold`. The mask is structural: a masked pair
/// is never an edge regardless of the threshold's sign.
pub fn build_adjacency<T: Scalar>(
    weights: &Tensor<T>,
    mask: &BitMatrix,
    threshold: f64,
) -> Result<BitMatrix> {
    if weights.rows() != mask.rows() || weights.cols() != mask.cols() {
        return Err(StgtError::ShapeMismatch {
            op: "build_adjacency",
            left: weights.shape().to_vec(),
            right: vec![mask.rows(), mask.cols()],
        });
    }
    let h = T::from_f64(threshold);
    let mut adj = BitMatrix::zeros(mask.rows(), mask.cols());
    for i in 0..mask.rows() {
        for j in 0..mask.cols() {
            if mask.get(i, j) && weights.at(i, j) >= h {
                adj.set(i, j, true);
            }
        }
    }
    Ok(adj)
}

/// Full construction from local token features: cosine similarity, temporal
/// mask, thresholded adjacency, sparse neighbor lists.
pub fn build_graph<T: Scalar>(
    x_l: &Tensor<T>,
    frames: usize,
    tokens_per_frame: usize,
    threshold: f64,
    normalize: bool,
) -> Result<SpatioTemporalGraph<T>> {
    let n = frames * tokens_per_frame;
    if x_l.rows() != n {
        return Err(StgtError::ShapeMismatch {
            op: "build_graph",
            left: x_l.shape().to_vec(),
            right: vec![n, x_l.cols()],
        });
    }
    let weights = token_similarity(x_l, normalize);
    let mask = temporal_mask(frames, tokens_per_frame);
    let adjacency = build_adjacency(&weights, &mask, threshold)?;
    let neighbors = (0..n).map(|i| adjacency.row_indices(i)).collect();
    Ok(SpatioTemporalGraph {
        node_count: n,
        adjacency,
        neighbors,
        weights,
        frames,
        tokens_per_frame,
        threshold,
    })
}

/// Gradient of [`token_similarity`] with respect to the token features. The
/// forced 1.0 diagonal of the normalized mode is constant (the cosine of a
/// row with itself is 1 for any nonzero row), so it carries no gradient;
/// clamping is ignored as a measure-zero event.
pub fn token_similarity_backward<T: Scalar>(
    x_l: &Tensor<T>,
    d_w: &Tensor<T>,
    normalize: bool,
) -> Tensor<T> {
    let n = x_l.rows();
    let d = x_l.cols();
    let mut dx = Tensor::zeros(&[n, d]);
    if !normalize {
        // W = X X^T: dX_i = sum_j (dW_ij + dW_ji) X_j
        for i in 0..n {
            for j in 0..n {
                let g = d_w.at(i, j);
                if g == T::zero() {
                    continue;
                }
                for c in 0..d {
                    let cur = dx.at(i, c);
                    dx.set(i, c, cur + g * x_l.at(j, c));
                    let cur = dx.at(j, c);
                    dx.set(j, c, cur + g * x_l.at(i, c));
                }
            }
        }
        return dx;
    }
    let xhat = l2_normalize_rows(x_l);
    let norms: Vec<T> = (0..n).map(|i| crate::tensor::l2_norm(x_l.row(i))).collect();
    // gradient w.r.t. the normalized rows first
    let mut dxhat: Tensor<T> = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue; // diagonal is constant 1
            }
            let g = d_w.at(i, j);
            if g == T::zero() {
                continue;
            }
            for c in 0..d {
                let cur = dxhat.at(i, c);
                dxhat.set(i, c, cur + g * xhat.at(j, c));
                let cur = dxhat.at(j, c);
                dxhat.set(j, c, cur + g * xhat.at(i, c));
            }
        }
    }
    // normalize VJP per row: dx = (dy - (dy . y) y) / ||x||
    for i in 0..n {
        let r = norms[i];
        if r <= T::from_f64(1e-300) {
            continue;
        }
        let mut dot = T::zero();
        for c in 0..d {
            dot = dot + dxhat.at(i, c) * xhat.at(i, c);
        }
        for c in 0..d {
            dx.set(i, c, (dxhat.at(i, c) - dot * xhat.at(i, c)) / r);
        }
    }
    dx
}

pub fn degree_stats<T: Scalar>(g: &SpatioTemporalGraph<T>) -> DegreeStats {
    let n = g.node_count;
    let ones = g.adjacency.count_ones();
    let isolated = (0..n).filter(|&i| g.neighbors[i].is_empty()).count();
    DegreeStats {
        mean_degree: ones as f64 / n as f64,
        density: ones as f64 / (n * n) as f64,
        isolated_nodes: isolated,
    }
}

/// Newline-delimited dump: one line per node listing `neighbor:weight` pairs.
pub fn dump_graph<T: Scalar, W: Write>(g: &SpatioTemporalGraph<T>, out: &mut W) -> Result<()> {
    writeln!(
        out,
        "# stgt graph nodes={} frames={} tokens_per_frame={} threshold={}",
        g.node_count, g.frames, g.tokens_per_frame, g.threshold
    )?;
    for i in 0..g.node_count {
        write!(out, "{i}:")?;
        for &j in &g.neighbors[i] {
            write!(out, " {j}:{:.6}", g.weights.at(i, j).to_f64_lossy())?;
        }
        writeln!(out)?;
    }
    Ok(())
}
