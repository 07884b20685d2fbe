//! Flat parameter storage with named segments, plus the central-difference
//! gradient oracle that every analytic gradient in this crate is checked
//! against.

use crate::error::{Result, StgtError};
use crate::tensor::{Scalar, Tensor};

/// One named contiguous slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered named segments over one flat array. Segments are contiguous,
/// non-overlapping and cover the whole array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T = f64> {
    segments: Vec<Segment>,
    data: Vec<T>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> &[T] {
        let s = self
            .segment(name)
            .unwrap_or_else(|| panic!("unknown parameter segment {name}"));
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [T] {
        let s = self
            .segment(name)
            .unwrap_or_else(|| panic!("unknown parameter segment {name}"))
            .clone();
        &mut self.data[s.offset..s.offset + s.len()]
    }

    /// Copy a segment out as an owned tensor with the registered shape.
    pub fn tensor(&self, name: &str) -> Tensor<T> {
        let s = self
            .segment(name)
            .unwrap_or_else(|| panic!("unknown parameter segment {name}"));
        Tensor::new(
            self.data[s.offset..s.offset + s.len()].to_vec(),
            s.shape.clone(),
        )
        .expect("segment shape consistent")
    }

    pub fn scalar(&self, name: &str) -> T {
        let s = self.slice(name);
        assert_eq!(s.len(), 1, "segment {name} is not a scalar");
        s[0]
    }

    /// Same segment layout, all values zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self.segments.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    /// In-place `self += other * scale` over the flat array.
    pub fn axpy(&mut self, scale: T, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
    }

    /// Accumulate `grad` (flat, row-major, matching the registered shape)
    /// into the named segment.
    pub fn accumulate(&mut self, name: &str, grad: &[T]) {
        let dst = self.slice_mut(name);
        assert_eq!(dst.len(), grad.len(), "gradient size mismatch for {name}");
        for (a, &b) in dst.iter_mut().zip(grad) {
            *a = *a + b;
        }
    }

    pub fn l2_norm_of(&self, name: &str) -> T {
        crate::tensor::l2_norm(self.slice(name))
    }

    pub fn cast<U: Scalar>(&self) -> ParamVector<U> {
        ParamVector {
            segments: self.segments.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64_lossy()))
                .collect(),
        }
    }
}

/// Builds a [`ParamVector`] segment by segment.
#[derive(Debug, Default)]
pub struct ParamVectorBuilder<T = f64> {
    segments: Vec<Segment>,
    data: Vec<T>,
}

impl<T: Scalar> ParamVectorBuilder<T> {
    pub fn new() -> Self {
        Self {
            segments: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> &mut Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, values.len(), "segment {name} size mismatch");
        assert!(
            self.segments.iter().all(|s| s.name != name),
            "duplicate segment {name}"
        );
        self.segments.push(Segment {
            name: name.to_string(),
            offset: self.data.len(),
            shape: shape.to_vec(),
        });
        self.data.extend(values);
        self
    }

    pub fn push_zeros(&mut self, name: &str, shape: &[usize]) -> &mut Self {
        let len = shape.iter().product();
        self.push(name, shape, vec![T::zero(); len])
    }

    pub fn build(self) -> ParamVector<T> {
        ParamVector {
            segments: self.segments,
            data: self.data,
        }
    }
}

/// Central finite differences `(f(x+eps e_i) - f(x-eps e_i)) / (2 eps)` for
/// every coordinate. The verification oracle for all analytic gradients.
pub fn finite_diff_grad<T, F>(f: F, theta: &ParamVector<T>, eps: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&ParamVector<T>) -> T,
{
    if eps <= T::zero() {
        return Err(StgtError::Config("finite_diff_grad requires eps > 0".into()));
    }
    let mut grad = Vec::with_capacity(theta.len());
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let fp = f(&probe);
        probe.data[i] = orig - eps;
        let fm = f(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(StgtError::NonFinite {
                context: "finite_diff_grad".into(),
                coord: i,
            });
        }
        grad.push((fp - fm) / (eps + eps));
    }
    Ok(grad)
}

/// Per-segment relative error between an analytic gradient and the finite
/// difference oracle: `||a - f||_2 / max(||a||_2 + ||f||_2, floor)`. The
/// floor is a small fraction of the whole-vector gradient norm: on segments
/// whose true gradient is negligible relative to the rest, finite-difference
/// roundoff would otherwise dominate a purely per-segment ratio.
pub fn segment_relative_errors(
    theta: &ParamVector<f64>,
    analytic: &[f64],
    fd: &[f64],
) -> Vec<(String, f64)> {
    assert_eq!(analytic.len(), theta.len());
    assert_eq!(fd.len(), theta.len());
    let global = crate::tensor::l2_norm(analytic) + crate::tensor::l2_norm(fd);
    let floor = (1e-3 * global).max(1e-12);
    theta
        .segments()
        .iter()
        .map(|s| {
            let a = &analytic[s.offset..s.offset + s.len()];
            let f = &fd[s.offset..s.offset + s.len()];
            let diff: f64 = a
                .iter()
                .zip(f)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let na = crate::tensor::l2_norm(a);
            let nf = crate::tensor::l2_norm(f);
            (s.name.clone(), diff / (na + nf).max(floor))
        })
        .collect()
}
