//! Dense row-major tensors and the handful of kernels everything else is
//! built from: matrix products, masked softmax, layer normalization and row
//! L2 normalization.
//!
//! All reductions run in a fixed left-to-right order so repeated runs are
//! bit-identical.

use crate::error::{Result, StgtError};
use num_traits::Float;

/// Element type of a [`Tensor`]. `f64` is the verification precision,
/// `f32` the benchmark precision.
pub trait Scalar:
    Float + std::iter::Sum + std::fmt::Debug + std::fmt::Display + Default + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Dense real-valued array with explicit shape metadata, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    data: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(data: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(StgtError::ShapeMismatch {
                op: "Tensor::new",
                left: vec![data.len()],
                right: shape,
            });
        }
        Ok(Self { data, shape })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: vec![T::zero(); shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input; test convenience.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            data,
            shape: vec![r, c],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(StgtError::ShapeMismatch {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            data,
            shape: self.shape.clone(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            data: self.data.iter().map(|&a| a * s).collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type (used to move the benchmark path onto `f32`).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64_lossy()))
                .collect(),
            shape: self.shape.clone(),
        }
    }
}

/// Dense bit-matrix used for attention masks and graph adjacency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    bits: Vec<bool>,
    rows: usize,
    cols: usize,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            bits: vec![false; rows * cols],
            rows,
            cols,
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            bits: vec![true; rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn row_ones(&self, i: usize) -> usize {
        self.bits[i * self.cols..(i + 1) * self.cols]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// Column indices of set bits in row `i`, ascending.
    pub fn row_indices(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.get(i, j)).collect()
    }
}

/// Exact dense product with deterministic left-to-right summation over the
/// inner dimension.
///
/// ```
/// use stgt::tensor::{matmul, Tensor};
/// let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
/// let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
/// let c = matmul(&a, &b).unwrap();
/// assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
/// ```
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols() != b.rows() {
        return Err(StgtError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let arow = a.row(i);
        for j in 0..c {
            let mut acc = T::zero();
            for (kk, &av) in arow.iter().enumerate().take(k) {
                acc = acc + av * b.at(kk, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Row-wise softmax restricted to positions where `keep` is set.
///
/// Dropped positions are exactly zero in the output; a row with no kept
/// entries comes back all zeros so isolated graph nodes attend to nothing.
///
/// ```
/// use stgt::tensor::{masked_softmax, BitMatrix, Tensor};
/// let logits = Tensor::from_rows(&[vec![5.0, -2.0]]);
/// let mut keep = BitMatrix::zeros(1, 2);
/// keep.set(0, 0, true);
/// let p = masked_softmax(&logits, &keep).unwrap();
/// assert_eq!(p.data(), &[1.0, 0.0]);
/// ```
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, keep: &BitMatrix) -> Result<Tensor<T>> {
    if logits.rows() != keep.rows() || logits.cols() != keep.cols() {
        return Err(StgtError::ShapeMismatch {
            op: "masked_softmax",
            left: logits.shape().to_vec(),
            right: vec![keep.rows(), keep.cols()],
        });
    }
    let (r, c) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let mut max = T::neg_infinity();
        for j in 0..c {
            if keep.get(i, j) && logits.at(i, j) > max {
                max = logits.at(i, j);
            }
        }
        if max == T::neg_infinity() {
            continue; // no kept entries, row stays zero
        }
        let mut sum = T::zero();
        for j in 0..c {
            if keep.get(i, j) {
                let e = (logits.at(i, j) - max).exp();
                out.set(i, j, e);
                sum = sum + e;
            }
        }
        for j in 0..c {
            if keep.get(i, j) {
                out.set(i, j, out.at(i, j) / sum);
            }
        }
    }
    Ok(out)
}

/// Softmax over full rows (every position kept).
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let keep = BitMatrix::ones(logits.rows(), logits.cols());
    masked_softmax(logits, &keep).expect("shapes agree by construction")
}

/// Per-row layer normalization: `gain * (x - mean) / sqrt(var + eps) + bias`
/// with the biased (1/d) variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(StgtError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: vec![gain.len(), bias.len()],
        });
    }
    if d == 0 || eps <= T::zero() {
        return Err(StgtError::Config(
            "layer_norm requires d >= 1 and eps > 0".into(),
        ));
    }
    let dn = T::from_f64(d as f64);
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / dn;
        let denom = (var + eps).sqrt();
        for j in 0..d {
            out.set(i, j, gain[j] * (row[j] - mean) / denom + bias[j]);
        }
    }
    Ok(out)
}

/// L2 norm of a slice, fixed summation order.
pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Scale each row to Euclidean norm 1. All-zero rows pass through unchanged.
///
/// ```
/// use stgt::tensor::{l2_normalize_rows, Tensor};
/// let x = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]);
/// let y = l2_normalize_rows(&x);
/// assert_eq!(y.data(), &[0.6, 0.8, 0.0, 0.0]);
/// ```
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let n = l2_norm(x.row(i));
        if n > T::zero() {
            for v in out.row_mut(i) {
                *v = *v / n;
            }
        }
    }
    out
}
