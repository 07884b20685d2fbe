//! Sinusoidal 2D spatial embeddings and learnable temporal embeddings, plus
//! per-frame token assembly.
//!
//! The sin/cos exponents follow an unusual convention: for index
//! `i in 1..=d/2` the sin slot uses exponent `2i/d` and the cos slot uses
//! `(2i-1)/d`, so the first sin frequency is `10000^(-2/d)` rather than 1.
//! The scalar oracles in the tests apply the same exponents.

use crate::error::{Result, StgtError};
use crate::tensor::{Scalar, Tensor};

/// Sinusoidal embedding table over an `n x n` grid of patch coordinates.
#[derive(Debug, Clone)]
pub struct SpatialEmbeddingTable<T = f64> {
    pub grid_side: usize,
    pub dim: usize,
    /// Row `(y-1)*n + (x-1)` holds the embedding of cell `(x, y)`.
    pub table: Tensor<T>,
}

/// Learnable per-frame embeddings; the table lives in the model's
/// `ParamVector` and is copied here for the forward pass.
#[derive(Debug, Clone)]
pub struct TemporalEmbeddingTable<T = f64> {
    pub frames: usize,
    pub dim: usize,
    pub table: Tensor<T>,
}

impl<T: Scalar> TemporalEmbeddingTable<T> {
    pub fn new(table: Tensor<T>) -> Self {
        Self {
            frames: table.rows(),
            dim: table.cols(),
            table,
        }
    }
}

/// Sinusoidal embedding of a scalar position: for `i in 1..=d/2`, slot
/// `2(i-1)` is `sin(z / 10000^(2i/d))` and slot `2(i-1)+1` is
/// `cos(z / 10000^((2i-1)/d))`.
///
/// ```
/// let e = stgt::embed::sinusoid_embed::<f64>(0.0, 6).unwrap();
/// assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
/// ```
pub fn sinusoid_embed<T: Scalar>(z: f64, d: usize) -> Result<Vec<T>> {
    if d < 2 || d % 2 != 0 {
        return Err(StgtError::Config(format!(
            "sinusoid embedding dimension must be even and >= 2, got {d}"
        )));
    }
    let mut out = vec![T::zero(); d];
    for i in 1..=d / 2 {
        let sin_freq = 10000f64.powf(2.0 * i as f64 / d as f64);
        let cos_freq = 10000f64.powf((2.0 * i as f64 - 1.0) / d as f64);
        out[2 * (i - 1)] = T::from_f64((z / sin_freq).sin());
        out[2 * (i - 1) + 1] = T::from_f64((z / cos_freq).cos());
    }
    Ok(out)
}

/// Angular frequency of each slot of [`sinusoid_embed`]; the per-coordinate
/// Lipschitz constant in `z`.
pub fn sinusoid_frequencies(d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 1..=d / 2 {
        out[2 * (i - 1)] = 10000f64.powf(-2.0 * i as f64 / d as f64);
        out[2 * (i - 1) + 1] = 10000f64.powf(-(2.0 * i as f64 - 1.0) / d as f64);
    }
    out
}

/// 2D table over 1-based grid coordinates `(x, y)`: each row is the
/// concatenation of the x-coordinate and y-coordinate embeddings, `d/2` each.
pub fn build_spatial_table<T: Scalar>(n: usize, d: usize) -> Result<SpatialEmbeddingTable<T>> {
    if n < 1 {
        return Err(StgtError::Config("grid side must be >= 1".into()));
    }
    if d % 4 != 0 || d == 0 {
        return Err(StgtError::Config(format!(
            "spatial embedding dimension must be divisible by 4, got {d}"
        )));
    }
    let mut table = Tensor::zeros(&[n * n, d]);
    for y in 1..=n {
        for x in 1..=n {
            let ex = sinusoid_embed::<T>(x as f64, d / 2)?;
            let ey = sinusoid_embed::<T>(y as f64, d / 2)?;
            let row = table.row_mut((y - 1) * n + (x - 1));
            row[..d / 2].copy_from_slice(&ex);
            row[d / 2..].copy_from_slice(&ey);
        }
    }
    Ok(SpatialEmbeddingTable {
        grid_side: n,
        dim: d,
        table,
    })
}

/// Adds the frame's temporal embedding to every token and the spatial
/// embedding to every local token. Row 0 is the global token and carries no
/// grid position, so it gets the temporal term only. `frame_index` is
/// 1-based.
pub fn assemble_frame<T: Scalar>(
    tokens: &Tensor<T>,
    spatial: &SpatialEmbeddingTable<T>,
    temporal: &TemporalEmbeddingTable<T>,
    frame_index: usize,
) -> Result<Tensor<T>> {
    let n2 = spatial.grid_side * spatial.grid_side;
    if tokens.rows() != 1 + n2 || tokens.cols() != spatial.dim {
        return Err(StgtError::ShapeMismatch {
            op: "assemble_frame",
            left: tokens.shape().to_vec(),
            right: vec![1 + n2, spatial.dim],
        });
    }
    if frame_index < 1 || frame_index > temporal.frames {
        return Err(StgtError::IndexOutOfRange {
            what: "frame_index",
            got: frame_index,
            max: temporal.frames,
        });
    }
    let mut out = tokens.clone();
    let t_row: Vec<T> = temporal.table.row(frame_index - 1).to_vec();
    for r in 0..out.rows() {
        for (v, &t) in out.row_mut(r).iter_mut().zip(&t_row) {
            *v = *v + t;
        }
    }
    for k in 1..=n2 {
        let s_row: Vec<T> = spatial.table.row(k - 1).to_vec();
        for (v, &s) in out.row_mut(k).iter_mut().zip(&s_row) {
            *v = *v + s;
        }
    }
    Ok(out)
}
