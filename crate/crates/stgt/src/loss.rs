//! Alignment losses over a batch of paired video/text embeddings: the
//! symmetric contrastive loss (one-hot targets) and the cross-similarity
//! alignment loss (soft targets from within-modality similarities), plus the
//! two-stage weighted total. Gradients are analytic and finite-difference
//! checked.

use crate::error::{Result, StgtError};
use crate::tensor::{matmul, softmax_rows, Scalar, Tensor};

/// Temperature bounds and init shared with the trainer.
pub const TAU_MIN: f64 = 0.001;
pub const TAU_MAX: f64 = 0.5;
pub const TAU_INIT: f64 = 0.07;

/// A batch of paired embeddings. Rows are expected to be (approximately)
/// unit-norm; similarities are plain dot products of the given rows.
#[derive(Debug, Clone)]
pub struct EmbeddingPair<T = f64> {
    pub video: Tensor<T>,
    pub text: Tensor<T>,
    /// Learnable temperature, stored as log tau.
    pub log_tau: T,
}

#[derive(Debug, Clone)]
pub struct LossGrads<T = f64> {
    pub d_video: Tensor<T>,
    pub d_text: Tensor<T>,
    pub d_log_tau: T,
}

impl<T: Scalar> LossGrads<T> {
    fn zeros(b: usize, e: usize) -> Self {
        Self {
            d_video: Tensor::zeros(&[b, e]),
            d_text: Tensor::zeros(&[b, e]),
            d_log_tau: T::zero(),
        }
    }

    fn scaled_sum(a: &Self, wa: T, b: &Self, wb: T) -> Self {
        let mut d_video = a.d_video.clone().scale(wa);
        d_video.add_assign(&b.d_video.clone().scale(wb));
        let mut d_text = a.d_text.clone().scale(wa);
        d_text.add_assign(&b.d_text.clone().scale(wb));
        Self {
            d_video,
            d_text,
            d_log_tau: wa * a.d_log_tau + wb * b.d_log_tau,
        }
    }
}

/// Everything a training step records about one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossReport<T = f64> {
    pub vtc: T,
    pub csal: T,
    pub total: T,
    pub tau: T,
    pub p_v2t: Tensor<T>,
    pub p_t2v: Tensor<T>,
    pub csal_weights: Tensor<T>,
    pub grads: LossGrads<T>,
}

/// tau = clamp(exp(log_tau), TAU_MIN, TAU_MAX); the second value is
/// d tau / d log_tau (zero in the clamped regions).
pub fn tau_of<T: Scalar>(log_tau: T) -> (T, T) {
    let raw = log_tau.exp();
    let lo = T::from_f64(TAU_MIN);
    let hi = T::from_f64(TAU_MAX);
    if raw < lo {
        (lo, T::zero())
    } else if raw > hi {
        (hi, T::zero())
    } else {
        (raw, raw)
    }
}

fn check_pair<T: Scalar>(pair: &EmbeddingPair<T>) -> Result<(usize, usize)> {
    let b = pair.video.rows();
    let e = pair.video.cols();
    if pair.text.rows() != b || pair.text.cols() != e {
        return Err(StgtError::ShapeMismatch {
            op: "alignment_loss",
            left: pair.video.shape().to_vec(),
            right: pair.text.shape().to_vec(),
        });
    }
    if b == 0 {
        return Err(StgtError::Config("empty batch".into()));
    }
    // Coarse unit-norm check: strict enough to catch unnormalized inputs,
    // loose enough for finite-difference probes around the sphere.
    for (name, t) in [("video", &pair.video), ("text", &pair.text)] {
        for i in 0..b {
            let n = crate::tensor::l2_norm(t.row(i)).to_f64_lossy();
            if (n - 1.0).abs() > 1e-3 {
                return Err(StgtError::Config(format!(
                    "{name} row {i} has norm {n}, expected unit"
                )));
            }
        }
    }
    Ok((b, e))
}

/// Shared core: both losses are of the form
/// `-(1/2B) sum_ij w_ij [log P_v2t(i,j) + log P_t2v(i,j)]`
/// with row-stochastic targets `w` (one-hot for the contrastive loss). The
/// logit gradient is `(1/2B)[(P_v2t - W) + (P_t2v - W)^T]`.
fn soft_target_loss<T: Scalar>(
    pair: &EmbeddingPair<T>,
    targets: &Tensor<T>,
) -> Result<(T, Tensor<T>, Tensor<T>, LossGrads<T>)> {
    let (b, e) = check_pair(pair)?;
    let (tau, dtau_dlog) = tau_of(pair.log_tau);
    let s = matmul(&pair.video, &pair.text.transpose())?;
    let z = s.clone().scale(T::one() / tau);
    let p_v2t = softmax_rows(&z);
    let p_t2v = softmax_rows(&z.transpose());

    let bn = T::from_f64(b as f64);
    let half_inv = T::one() / (bn + bn); // 1/(2B)
    let mut loss = T::zero();
    for i in 0..b {
        for j in 0..b {
            let w = targets.at(i, j);
            if w != T::zero() {
                loss = loss - half_inv * w * (p_v2t.at(i, j).ln() + p_t2v.at(i, j).ln());
            }
        }
    }

    // dL/dZ
    let mut dz = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            let g = (p_v2t.at(i, j) - targets.at(i, j))
                + (p_t2v.at(j, i) - targets.at(j, i));
            dz.set(i, j, half_inv * g);
        }
    }
    // Z = S / tau
    let ds = dz.clone().scale(T::one() / tau);
    let mut dtau = T::zero();
    for (g, &sv) in dz.data().iter().zip(s.data()) {
        dtau = dtau - *g * sv / (tau * tau);
    }
    let d_video = matmul(&ds, &pair.text)?;
    let d_text = matmul(&ds.transpose(), &pair.video)?;
    let _ = e;
    Ok((
        loss,
        p_v2t,
        p_t2v,
        LossGrads {
            d_video,
            d_text,
            d_log_tau: dtau * dtau_dlog,
        },
    ))
}

/// Symmetric contrastive loss with one-hot targets.
pub fn vtc_loss<T: Scalar>(
    pair: &EmbeddingPair<T>,
) -> Result<(T, Tensor<T>, Tensor<T>, LossGrads<T>)> {
    let b = pair.video.rows();
    let mut y = Tensor::zeros(&[b, b]);
    for i in 0..b {
        y.set(i, i, T::one());
    }
    soft_target_loss(pair, &y)
}

/// Cross-similarity targets: entry (i, j) is the product of the
/// within-modality similarities, with pairs where either similarity is
/// nonpositive marked `-inf` (excluded from the soft-target support). The
/// diagonal is always exactly 1.
pub fn cross_similarity_logits<T: Scalar>(s_vv: &Tensor<T>, s_tt: &Tensor<T>) -> Tensor<T> {
    let b = s_vv.rows();
    let mut out = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                out.set(i, j, T::one());
            } else if s_vv.at(i, j).min(s_tt.at(i, j)) <= T::zero() {
                out.set(i, j, T::neg_infinity());
            } else {
                out.set(i, j, s_vv.at(i, j) * s_tt.at(i, j));
            }
        }
    }
    out
}

/// Row softmax of `gamma * cross_logits` over the finite entries only. The
/// diagonal is finite by construction, so every row is a distribution.
pub fn csal_weights<T: Scalar>(pair: &EmbeddingPair<T>, gamma: T) -> Result<Tensor<T>> {
    if gamma <= T::zero() {
        return Err(StgtError::Config(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let s_vv = matmul(&pair.video, &pair.video.transpose())?;
    let s_tt = matmul(&pair.text, &pair.text.transpose())?;
    let logits = cross_similarity_logits(&s_vv, &s_tt);
    let b = logits.rows();
    let mut w = Tensor::zeros(&[b, b]);
    for i in 0..b {
        let mut max = T::neg_infinity();
        for j in 0..b {
            let l = logits.at(i, j);
            if l > max {
                max = l;
            }
        }
        let mut sum = T::zero();
        for j in 0..b {
            let l = logits.at(i, j);
            if l != T::neg_infinity() {
                let e = (gamma * (l - max)).exp();
                w.set(i, j, e);
                sum = sum + e;
            }
        }
        for j in 0..b {
            w.set(i, j, w.at(i, j) / sum);
        }
    }
    Ok(w)
}

/// The soft-target loss with externally supplied (frozen) targets. This is
/// the exact function the finite-difference oracle evaluates, since the
/// targets carry no gradient.
pub fn csal_loss_with_weights<T: Scalar>(
    pair: &EmbeddingPair<T>,
    weights: &Tensor<T>,
) -> Result<(T, Tensor<T>, Tensor<T>, LossGrads<T>)> {
    soft_target_loss(pair, weights)
}

/// Cross-similarity alignment loss: soft targets computed from the batch
/// itself (treated as constants), then the shared soft-target objective.
pub fn csal_loss<T: Scalar>(
    pair: &EmbeddingPair<T>,
    gamma: T,
) -> Result<(T, Tensor<T>, Tensor<T>, LossGrads<T>, Tensor<T>)> {
    let w = csal_weights(pair, gamma)?;
    let (loss, p_v2t, p_t2v, grads) = soft_target_loss(pair, &w)?;
    Ok((loss, p_v2t, p_t2v, grads, w))
}

/// Two-stage weighted total: `alpha * vtc + (1 - alpha) * csal`. The strict
/// schedule allows only 0 and 1; fractional mixing is opt-in.
pub fn total_loss<T: Scalar>(
    pair: &EmbeddingPair<T>,
    alpha: T,
    gamma: T,
    allow_fractional_alpha: bool,
) -> Result<LossReport<T>> {
    if alpha < T::zero() || alpha > T::one() {
        return Err(StgtError::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if !allow_fractional_alpha && alpha != T::zero() && alpha != T::one() {
        return Err(StgtError::Config(format!(
            "alpha must be 0 or 1 under the two-stage schedule, got {alpha}"
        )));
    }
    let (vtc, p_v2t, p_t2v, g_vtc) = vtc_loss(pair)?;
    let (csal, cp_v2t, cp_t2v, g_csal, w) = csal_loss(pair, gamma)?;
    let (tau, _) = tau_of(pair.log_tau);
    let one_m = T::one() - alpha;
    let total = alpha * vtc + one_m * csal;
    let grads = if alpha == T::one() {
        g_vtc
    } else if alpha == T::zero() {
        g_csal
    } else {
        LossGrads::scaled_sum(&g_vtc, alpha, &g_csal, one_m)
    };
    // report the probabilities of the active stage
    let (rp_v2t, rp_t2v) = if alpha == T::zero() {
        (cp_v2t, cp_t2v)
    } else {
        (p_v2t, p_t2v)
    };
    Ok(LossReport {
        vtc,
        csal,
        total,
        tau,
        p_v2t: rp_v2t,
        p_t2v: rp_t2v,
        csal_weights: w,
        grads,
    })
}

impl<T: Scalar> LossReport<T> {
    pub fn zeros(b: usize, e: usize) -> Self {
        Self {
            vtc: T::zero(),
            csal: T::zero(),
            total: T::zero(),
            tau: T::from_f64(TAU_INIT),
            p_v2t: Tensor::zeros(&[b, b]),
            p_t2v: Tensor::zeros(&[b, b]),
            csal_weights: Tensor::zeros(&[b, b]),
            grads: LossGrads::zeros(b, e),
        }
    }
}
