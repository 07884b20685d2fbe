//! The spatio-temporal graph transformer block: cross-frame attention over
//! global tokens, graph-masked attention over local tokens, residual
//! global-local fusion and max-pooling sampling.
//!
//! Every forward pass has a matching hand-written backward pass; the test
//! suite checks each against central finite differences.

use crate::error::{Result, StgtError};
use crate::graph::SpatioTemporalGraph;
use crate::param::{ParamVector, ParamVectorBuilder};
use crate::tensor::{matmul, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Parameter containers. The same structs double as gradient accumulators.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttnParams<T = f64> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct MlpParams<T = f64> {
    pub w1: Tensor<T>,
    pub b1: Vec<T>,
    pub w2: Tensor<T>,
    pub b2: Vec<T>,
}

/// One pre-norm residual transformer block:
/// `x' = MSA(LN(x)) + x; x'' = MLP(LN(x')) + x'`.
#[derive(Debug, Clone)]
pub struct BlockParams<T = f64> {
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub attn: AttnParams<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    pub mlp: MlpParams<T>,
    pub heads: usize,
}

/// Projections of the graph-masked attention (no residual, matching the
/// plain `Attention(X) W^l` form).
#[derive(Debug, Clone)]
pub struct GraphAttnParams<T = f64> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wl: Tensor<T>,
    pub heads: usize,
    /// Ablation switch: with this off, kept logits are not multiplied by the
    /// similarity weights.
    pub use_edge_weights: bool,
}

/// All learnable weights of one STGT block.
#[derive(Debug, Clone)]
pub struct STGTParams<T = f64> {
    pub graph_attn: GraphAttnParams<T>,
    pub cross_frame: BlockParams<T>,
    pub fusion: BlockParams<T>,
}

impl<T: Scalar> AttnParams<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
        }
    }
}

impl<T: Scalar> MlpParams<T> {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[d, hidden]),
            b1: vec![T::zero(); hidden],
            w2: Tensor::zeros(&[hidden, d]),
            b2: vec![T::zero(); d],
        }
    }
}

impl<T: Scalar> BlockParams<T> {
    pub fn zeros(d: usize, hidden: usize, heads: usize) -> Self {
        Self {
            ln1_gain: vec![T::zero(); d],
            ln1_bias: vec![T::zero(); d],
            attn: AttnParams::zeros(d),
            ln2_gain: vec![T::zero(); d],
            ln2_bias: vec![T::zero(); d],
            mlp: MlpParams::zeros(d, hidden),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.ln1_gain.len()
    }

    pub fn hidden(&self) -> usize {
        self.mlp.b1.len()
    }
}

impl<T: Scalar> GraphAttnParams<T> {
    pub fn zeros(d: usize, heads: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wl: Tensor::zeros(&[d, d]),
            heads,
            use_edge_weights: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }
}

// ---------------------------------------------------------------------------
// ParamVector registration, shared by the model and the gradient checker.
// ---------------------------------------------------------------------------

pub fn register_block<T: Scalar>(b: &mut ParamVectorBuilder<T>, prefix: &str, p: &BlockParams<T>) {
    let d = p.dim();
    let h = p.hidden();
    b.push(&format!("{prefix}.ln1.gain"), &[d], p.ln1_gain.clone());
    b.push(&format!("{prefix}.ln1.bias"), &[d], p.ln1_bias.clone());
    b.push(&format!("{prefix}.attn.wq"), &[d, d], p.attn.wq.data().to_vec());
    b.push(&format!("{prefix}.attn.wk"), &[d, d], p.attn.wk.data().to_vec());
    b.push(&format!("{prefix}.attn.wv"), &[d, d], p.attn.wv.data().to_vec());
    b.push(&format!("{prefix}.attn.wo"), &[d, d], p.attn.wo.data().to_vec());
    b.push(&format!("{prefix}.ln2.gain"), &[d], p.ln2_gain.clone());
    b.push(&format!("{prefix}.ln2.bias"), &[d], p.ln2_bias.clone());
    b.push(&format!("{prefix}.mlp.w1"), &[d, h], p.mlp.w1.data().to_vec());
    b.push(&format!("{prefix}.mlp.b1"), &[h], p.mlp.b1.clone());
    b.push(&format!("{prefix}.mlp.w2"), &[h, d], p.mlp.w2.data().to_vec());
    b.push(&format!("{prefix}.mlp.b2"), &[d], p.mlp.b2.clone());
}

pub fn block_from_pv<T: Scalar>(pv: &ParamVector<T>, prefix: &str, heads: usize) -> BlockParams<T> {
    BlockParams {
        ln1_gain: pv.slice(&format!("{prefix}.ln1.gain")).to_vec(),
        ln1_bias: pv.slice(&format!("{prefix}.ln1.bias")).to_vec(),
        attn: AttnParams {
            wq: pv.tensor(&format!("{prefix}.attn.wq")),
            wk: pv.tensor(&format!("{prefix}.attn.wk")),
            wv: pv.tensor(&format!("{prefix}.attn.wv")),
            wo: pv.tensor(&format!("{prefix}.attn.wo")),
        },
        ln2_gain: pv.slice(&format!("{prefix}.ln2.gain")).to_vec(),
        ln2_bias: pv.slice(&format!("{prefix}.ln2.bias")).to_vec(),
        mlp: MlpParams {
            w1: pv.tensor(&format!("{prefix}.mlp.w1")),
            b1: pv.slice(&format!("{prefix}.mlp.b1")).to_vec(),
            w2: pv.tensor(&format!("{prefix}.mlp.w2")),
            b2: pv.slice(&format!("{prefix}.mlp.b2")).to_vec(),
        },
        heads,
    }
}

pub fn accumulate_block<T: Scalar>(gb: &mut ParamVector<T>, prefix: &str, g: &BlockParams<T>) {
    gb.accumulate(&format!("{prefix}.ln1.gain"), &g.ln1_gain);
    gb.accumulate(&format!("{prefix}.ln1.bias"), &g.ln1_bias);
    gb.accumulate(&format!("{prefix}.attn.wq"), g.attn.wq.data());
    gb.accumulate(&format!("{prefix}.attn.wk"), g.attn.wk.data());
    gb.accumulate(&format!("{prefix}.attn.wv"), g.attn.wv.data());
    gb.accumulate(&format!("{prefix}.attn.wo"), g.attn.wo.data());
    gb.accumulate(&format!("{prefix}.ln2.gain"), &g.ln2_gain);
    gb.accumulate(&format!("{prefix}.ln2.bias"), &g.ln2_bias);
    gb.accumulate(&format!("{prefix}.mlp.w1"), g.mlp.w1.data());
    gb.accumulate(&format!("{prefix}.mlp.b1"), &g.mlp.b1);
    gb.accumulate(&format!("{prefix}.mlp.w2"), g.mlp.w2.data());
    gb.accumulate(&format!("{prefix}.mlp.b2"), &g.mlp.b2);
}

pub fn register_graph_attn<T: Scalar>(
    b: &mut ParamVectorBuilder<T>,
    prefix: &str,
    p: &GraphAttnParams<T>,
) {
    let d = p.dim();
    b.push(&format!("{prefix}.wq"), &[d, d], p.wq.data().to_vec());
    b.push(&format!("{prefix}.wk"), &[d, d], p.wk.data().to_vec());
    b.push(&format!("{prefix}.wv"), &[d, d], p.wv.data().to_vec());
    b.push(&format!("{prefix}.wl"), &[d, d], p.wl.data().to_vec());
}

pub fn graph_attn_from_pv<T: Scalar>(
    pv: &ParamVector<T>,
    prefix: &str,
    heads: usize,
    use_edge_weights: bool,
) -> GraphAttnParams<T> {
    GraphAttnParams {
        wq: pv.tensor(&format!("{prefix}.wq")),
        wk: pv.tensor(&format!("{prefix}.wk")),
        wv: pv.tensor(&format!("{prefix}.wv")),
        wl: pv.tensor(&format!("{prefix}.wl")),
        heads,
        use_edge_weights,
    }
}

pub fn accumulate_graph_attn<T: Scalar>(
    gb: &mut ParamVector<T>,
    prefix: &str,
    g: &GraphAttnParams<T>,
) {
    gb.accumulate(&format!("{prefix}.wq"), g.wq.data());
    gb.accumulate(&format!("{prefix}.wk"), g.wk.data());
    gb.accumulate(&format!("{prefix}.wv"), g.wv.data());
    gb.accumulate(&format!("{prefix}.wl"), g.wl.data());
}

// ---------------------------------------------------------------------------
// Activation
// ---------------------------------------------------------------------------

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_prime<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

// ---------------------------------------------------------------------------
// Layer norm with cache
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    x: Tensor<T>,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

fn ln_forward<T: Scalar>(x: &Tensor<T>, gain: &[T], bias: &[T]) -> (Tensor<T>, LnCache<T>) {
    let d = x.cols();
    let dn = T::from_f64(d as f64);
    let eps = T::from_f64(LN_EPS);
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.rows());
    let mut y = Tensor::zeros(x.shape());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        for j in 0..d {
            let h = (row[j] - mean) * istd;
            xhat.set(i, j, h);
            y.set(i, j, gain[j] * h + bias[j]);
        }
    }
    (
        y,
        LnCache {
            x: x.clone(),
            xhat,
            inv_std,
        },
    )
}

fn ln_backward<T: Scalar>(
    gain: &[T],
    cache: &LnCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let d = cache.x.cols();
    let dn = T::from_f64(d as f64);
    let mut dx = Tensor::zeros(cache.x.shape());
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    for i in 0..cache.x.rows() {
        let istd = cache.inv_std[i];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let g = dy.at(i, j);
            let xh = cache.xhat.at(i, j);
            dgain[j] = dgain[j] + g * xh;
            dbias[j] = dbias[j] + g;
            let dxh = g * gain[j];
            sum_dxhat = sum_dxhat + dxh;
            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh;
        }
        for j in 0..d {
            let xh = cache.xhat.at(i, j);
            let dxh = dy.at(i, j) * gain[j];
            dx.set(
                i,
                j,
                istd * (dxh - sum_dxhat / dn - xh * sum_dxhat_xhat / dn),
            );
        }
    }
    (dx, dgain, dbias)
}

// ---------------------------------------------------------------------------
// Full (unmasked) multi-head self-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MsaCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    probs: Vec<Tensor<T>>, // per head, S x S
    concat: Tensor<T>,
}

fn head_slice<T: Scalar>(t: &Tensor<T>, head: usize, dh: usize) -> Tensor<T> {
    let s = t.rows();
    let mut out = Tensor::zeros(&[s, dh]);
    for i in 0..s {
        for j in 0..dh {
            out.set(i, j, t.at(i, head * dh + j));
        }
    }
    out
}

fn head_place<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, head: usize, dh: usize) {
    for i in 0..src.rows() {
        for j in 0..dh {
            let cur = dst.at(i, head * dh + j);
            dst.set(i, head * dh + j, cur + src.at(i, j));
        }
    }
}

fn msa_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &AttnParams<T>,
    heads: usize,
) -> (Tensor<T>, MsaCache<T>) {
    let d = x.cols();
    assert_eq!(d % heads, 0, "dimension must be divisible by head count");
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let q = matmul(x, &p.wq).unwrap();
    let k = matmul(x, &p.wk).unwrap();
    let v = matmul(x, &p.wv).unwrap();
    let s = x.rows();
    let mut concat = Tensor::zeros(&[s, d]);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(&q, h, dh);
        let kh = head_slice(&k, h, dh);
        let vh = head_slice(&v, h, dh);
        let logits = matmul(&qh, &kh.transpose()).unwrap().scale(scale);
        let p_h = crate::tensor::softmax_rows(&logits);
        let oh = matmul(&p_h, &vh).unwrap();
        head_place(&mut concat, &oh, h, dh);
        probs.push(p_h);
    }
    let y = matmul(&concat, &p.wo).unwrap();
    (
        y,
        MsaCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

fn msa_backward<T: Scalar>(
    p: &AttnParams<T>,
    heads: usize,
    cache: &MsaCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, AttnParams<T>) {
    let d = cache.x.cols();
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let s = cache.x.rows();

    let d_concat = matmul(dy, &p.wo.transpose()).unwrap();
    let dwo = matmul(&cache.concat.transpose(), dy).unwrap();

    let mut dq = Tensor::zeros(&[s, d]);
    let mut dk = Tensor::zeros(&[s, d]);
    let mut dv = Tensor::zeros(&[s, d]);
    for h in 0..heads {
        let qh = head_slice(&cache.q, h, dh);
        let kh = head_slice(&cache.k, h, dh);
        let vh = head_slice(&cache.v, h, dh);
        let doh = head_slice(&d_concat, h, dh);
        let p_h = &cache.probs[h];

        let dp = matmul(&doh, &vh.transpose()).unwrap();
        let dvh = matmul(&p_h.transpose(), &doh).unwrap();
        // softmax rows backward
        let mut dlogits = Tensor::zeros(&[s, s]);
        for i in 0..s {
            let mut dot = T::zero();
            for j in 0..s {
                dot = dot + p_h.at(i, j) * dp.at(i, j);
            }
            for j in 0..s {
                dlogits.set(i, j, p_h.at(i, j) * (dp.at(i, j) - dot));
            }
        }
        let dqh = matmul(&dlogits, &kh).unwrap().scale(scale);
        let dkh = matmul(&dlogits.transpose(), &qh).unwrap().scale(scale);
        head_place(&mut dq, &dqh, h, dh);
        head_place(&mut dk, &dkh, h, dh);
        head_place(&mut dv, &dvh, h, dh);
    }
    let dwq = matmul(&cache.x.transpose(), &dq).unwrap();
    let dwk = matmul(&cache.x.transpose(), &dk).unwrap();
    let dwv = matmul(&cache.x.transpose(), &dv).unwrap();
    let mut dx = matmul(&dq, &p.wq.transpose()).unwrap();
    dx.add_assign(&matmul(&dk, &p.wk.transpose()).unwrap());
    dx.add_assign(&matmul(&dv, &p.wv.transpose()).unwrap());
    (
        dx,
        AttnParams {
            wq: dwq,
            wk: dwk,
            wv: dwv,
            wo: dwo,
        },
    )
}

// ---------------------------------------------------------------------------
// MLP with cache
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    hidden: Tensor<T>,
}

fn mlp_forward<T: Scalar>(x: &Tensor<T>, p: &MlpParams<T>) -> (Tensor<T>, MlpCache<T>) {
    let mut pre = matmul(x, &p.w1).unwrap();
    for i in 0..pre.rows() {
        for (v, &b) in pre.row_mut(i).iter_mut().zip(&p.b1) {
            *v = *v + b;
        }
    }
    let mut hidden = pre.clone();
    for v in hidden.data_mut() {
        *v = gelu(*v);
    }
    let mut y = matmul(&hidden, &p.w2).unwrap();
    for i in 0..y.rows() {
        for (v, &b) in y.row_mut(i).iter_mut().zip(&p.b2) {
            *v = *v + b;
        }
    }
    (
        y,
        MlpCache {
            input: x.clone(),
            pre,
            hidden,
        },
    )
}

fn mlp_backward<T: Scalar>(
    p: &MlpParams<T>,
    cache: &MlpCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, MlpParams<T>) {
    let dw2 = matmul(&cache.hidden.transpose(), dy).unwrap();
    let mut db2 = vec![T::zero(); dy.cols()];
    for i in 0..dy.rows() {
        for (b, &g) in db2.iter_mut().zip(dy.row(i)) {
            *b = *b + g;
        }
    }
    let mut dpre = matmul(dy, &p.w2.transpose()).unwrap();
    for (g, &z) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
        *g = *g * gelu_prime(z);
    }
    let dw1 = matmul(&cache.input.transpose(), &dpre).unwrap();
    let mut db1 = vec![T::zero(); dpre.cols()];
    for i in 0..dpre.rows() {
        for (b, &g) in db1.iter_mut().zip(dpre.row(i)) {
            *b = *b + g;
        }
    }
    let dx = matmul(&dpre, &p.w1.transpose()).unwrap();
    (
        dx,
        MlpParams {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        },
    )
}

// ---------------------------------------------------------------------------
// Residual transformer block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    ln1: LnCache<T>,
    msa: MsaCache<T>,
    ln2: LnCache<T>,
    mlp: MlpCache<T>,
}

pub fn transformer_block_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &BlockParams<T>,
) -> (Tensor<T>, BlockCache<T>) {
    let (a, ln1) = ln_forward(x, &p.ln1_gain, &p.ln1_bias);
    let (m, msa) = msa_forward(&a, &p.attn, p.heads);
    let x1 = m.add(x).unwrap();
    let (b, ln2) = ln_forward(&x1, &p.ln2_gain, &p.ln2_bias);
    let (f, mlp) = mlp_forward(&b, &p.mlp);
    let y = f.add(&x1).unwrap();
    (y, BlockCache { ln1, msa, ln2, mlp })
}

pub fn transformer_block_backward<T: Scalar>(
    p: &BlockParams<T>,
    cache: &BlockCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, BlockParams<T>) {
    // y = f + x1
    let (db, dmlp) = mlp_backward(&p.mlp, &cache.mlp, dy);
    let (dx1_ln, dg2, dbias2) = ln_backward(&p.ln2_gain, &cache.ln2, &db);
    let mut dx1 = dy.clone();
    dx1.add_assign(&dx1_ln);
    // x1 = m + x
    let (da, dattn) = msa_backward(&p.attn, p.heads, &cache.msa, &dx1);
    let (dx_ln, dg1, dbias1) = ln_backward(&p.ln1_gain, &cache.ln1, &da);
    let mut dx = dx1;
    dx.add_assign(&dx_ln);
    (
        dx,
        BlockParams {
            ln1_gain: dg1,
            ln1_bias: dbias1,
            attn: dattn,
            ln2_gain: dg2,
            ln2_bias: dbias2,
            mlp: dmlp,
            heads: p.heads,
        },
    )
}

/// Cross-frame attention over the per-frame global tokens (full attention,
/// residual transformer block).
pub fn cross_frame_attention<T: Scalar>(
    x_g: &Tensor<T>,
    p: &BlockParams<T>,
) -> (Tensor<T>, BlockCache<T>) {
    transformer_block_forward(x_g, p)
}

/// Residual fusion block over the concatenation of global and local tokens
/// (globals first, locals frame-major).
pub fn fuse_global_local<T: Scalar>(
    x_g2: &Tensor<T>,
    x_l2: &Tensor<T>,
    p: &BlockParams<T>,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    if x_g2.cols() != x_l2.cols() {
        return Err(StgtError::ShapeMismatch {
            op: "fuse_global_local",
            left: x_g2.shape().to_vec(),
            right: x_l2.shape().to_vec(),
        });
    }
    let d = x_g2.cols();
    let mut data = Vec::with_capacity((x_g2.rows() + x_l2.rows()) * d);
    data.extend_from_slice(x_g2.data());
    data.extend_from_slice(x_l2.data());
    let x = Tensor::new(data, vec![x_g2.rows() + x_l2.rows(), d])?;
    Ok(transformer_block_forward(&x, p))
}

// ---------------------------------------------------------------------------
// Graph-masked attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GraphAttnCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// probs[head][row][idx] aligned with `graph.neighbors[row]`.
    probs: Vec<Vec<Vec<T>>>,
    concat: Tensor<T>,
}

/// Per-row kept indices and probabilities, for the `dump-attention` surface.
#[derive(Debug, Clone)]
pub struct AttentionRecord<T = f64> {
    pub head: usize,
    pub row: usize,
    pub kept: Vec<usize>,
    pub probs: Vec<T>,
}

/// Sparse graph-masked attention. Per head, kept logits are
/// `(q_i . k_j) / sqrt(d_head)` times the edge weight; the softmax runs over
/// the kept set only and degree-0 rows produce zero rows.
pub fn graph_attention<T: Scalar>(
    x_l: &Tensor<T>,
    g: &SpatioTemporalGraph<T>,
    p: &GraphAttnParams<T>,
) -> Result<(Tensor<T>, GraphAttnCache<T>)> {
    if x_l.rows() != g.node_count {
        return Err(StgtError::ShapeMismatch {
            op: "graph_attention",
            left: x_l.shape().to_vec(),
            right: vec![g.node_count, p.dim()],
        });
    }
    let d = x_l.cols();
    let heads = p.heads;
    assert_eq!(d % heads, 0, "dimension must be divisible by head count");
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let n = x_l.rows();

    let q = matmul(x_l, &p.wq)?;
    let k = matmul(x_l, &p.wk)?;
    let v = matmul(x_l, &p.wv)?;

    let mut concat = Tensor::zeros(&[n, d]);
    let mut probs: Vec<Vec<Vec<T>>> = vec![Vec::with_capacity(n); heads];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let nbrs = &g.neighbors[i];
            if nbrs.is_empty() {
                probs[h].push(Vec::new());
                continue;
            }
            let qi = &q.row(i)[off..off + dh];
            let mut logits = Vec::with_capacity(nbrs.len());
            for &j in nbrs {
                let kj = &k.row(j)[off..off + dh];
                let mut dot = T::zero();
                for (a, b) in qi.iter().zip(kj) {
                    dot = dot + *a * *b;
                }
                let mut l = dot * scale;
                if p.use_edge_weights {
                    l = l * g.weights.at(i, j);
                }
                logits.push(l);
            }
            let max = logits
                .iter()
                .copied()
                .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
            let mut sum = T::zero();
            let mut pr: Vec<T> = logits
                .iter()
                .map(|&l| {
                    let e = (l - max).exp();
                    sum = sum + e;
                    e
                })
                .collect();
            for e in pr.iter_mut() {
                *e = *e / sum;
            }
            for (idx, &j) in nbrs.iter().enumerate() {
                let vj = &v.row(j)[off..off + dh];
                let w = pr[idx];
                for (c, &vv) in vj.iter().enumerate() {
                    let cur = concat.at(i, off + c);
                    concat.set(i, off + c, cur + w * vv);
                }
            }
            probs[h].push(pr);
        }
    }
    let y = matmul(&concat, &p.wl)?;
    Ok((
        y,
        GraphAttnCache {
            x: x_l.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    ))
}

/// Attention records of the last forward, for dumping.
pub fn attention_records<T: Scalar>(
    g: &SpatioTemporalGraph<T>,
    cache: &GraphAttnCache<T>,
) -> Vec<AttentionRecord<T>> {
    let mut out = Vec::new();
    for (h, head_probs) in cache.probs.iter().enumerate() {
        for (row, pr) in head_probs.iter().enumerate() {
            out.push(AttentionRecord {
                head: h,
                row,
                kept: g.neighbors[row].clone(),
                probs: pr.clone(),
            });
        }
    }
    out
}

/// Backward pass. Returns the input gradient, parameter gradients, and the
/// gradient with respect to the edge-weight matrix (nonzero on kept entries
/// only), which feeds back into the similarity computation.
pub fn graph_attention_backward<T: Scalar>(
    g: &SpatioTemporalGraph<T>,
    p: &GraphAttnParams<T>,
    cache: &GraphAttnCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, GraphAttnParams<T>, Tensor<T>) {
    let d = cache.x.cols();
    let heads = p.heads;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let n = cache.x.rows();

    let d_concat = matmul(dy, &p.wl.transpose()).unwrap();
    let dwl = matmul(&cache.concat.transpose(), dy).unwrap();

    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    let mut dws = Tensor::zeros(&[n, n]);

    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let nbrs = &g.neighbors[i];
            if nbrs.is_empty() {
                continue;
            }
            let pr = &cache.probs[h][i];
            let doi = &d_concat.row(i)[off..off + dh];
            // dp_j = do_i . v_j ; dv_j += p_j do_i
            let mut dp = Vec::with_capacity(nbrs.len());
            for (idx, &j) in nbrs.iter().enumerate() {
                let vj = &cache.v.row(j)[off..off + dh];
                let mut dot = T::zero();
                for (a, b) in doi.iter().zip(vj) {
                    dot = dot + *a * *b;
                }
                dp.push(dot);
                let w = pr[idx];
                for (c, &gv) in doi.iter().enumerate() {
                    let cur = dv.at(j, off + c);
                    dv.set(j, off + c, cur + w * gv);
                }
            }
            // softmax backward over the kept set
            let mut inner = T::zero();
            for (idx, &dpv) in dp.iter().enumerate() {
                inner = inner + pr[idx] * dpv;
            }
            let qi: Vec<T> = cache.q.row(i)[off..off + dh].to_vec();
            for (idx, &j) in nbrs.iter().enumerate() {
                let dl = pr[idx] * (dp[idx] - inner);
                let kj = &cache.k.row(j)[off..off + dh];
                let w_ij = if p.use_edge_weights {
                    g.weights.at(i, j)
                } else {
                    T::one()
                };
                let coef = dl * scale * w_ij;
                for c in 0..dh {
                    let cur = dq.at(i, off + c);
                    dq.set(i, off + c, cur + coef * kj[c]);
                    let cur = dk.at(j, off + c);
                    dk.set(j, off + c, cur + coef * qi[c]);
                }
                if p.use_edge_weights {
                    let mut dot = T::zero();
                    for (a, b) in qi.iter().zip(kj) {
                        dot = dot + *a * *b;
                    }
                    let cur = dws.at(i, j);
                    dws.set(i, j, cur + dl * scale * dot);
                }
            }
        }
    }

    let dwq = matmul(&cache.x.transpose(), &dq).unwrap();
    let dwk = matmul(&cache.x.transpose(), &dk).unwrap();
    let dwv = matmul(&cache.x.transpose(), &dv).unwrap();
    let mut dx = matmul(&dq, &p.wq.transpose()).unwrap();
    dx.add_assign(&matmul(&dk, &p.wk.transpose()).unwrap());
    dx.add_assign(&matmul(&dv, &p.wv.transpose()).unwrap());
    (
        dx,
        GraphAttnParams {
            wq: dwq,
            wk: dwk,
            wv: dwv,
            wl: dwl,
            heads: p.heads,
            use_edge_weights: p.use_edge_weights,
        },
        dws,
    )
}

/// Dense reference path: full `N x N` logits with `-inf` additive masking at
/// non-edges and edge-weight multiplication at edges. Kept deliberately
/// independent of the sparse code path.
pub fn graph_attention_dense<T: Scalar>(
    x_l: &Tensor<T>,
    g: &SpatioTemporalGraph<T>,
    p: &GraphAttnParams<T>,
) -> Result<Tensor<T>> {
    if x_l.rows() != g.node_count {
        return Err(StgtError::ShapeMismatch {
            op: "graph_attention_dense",
            left: x_l.shape().to_vec(),
            right: vec![g.node_count, p.dim()],
        });
    }
    let d = x_l.cols();
    let heads = p.heads;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let n = x_l.rows();

    let q = matmul(x_l, &p.wq)?;
    let k = matmul(x_l, &p.wk)?;
    let v = matmul(x_l, &p.wv)?;
    let mut concat = Tensor::zeros(&[n, d]);
    for h in 0..heads {
        let qh = head_slice(&q, h, dh);
        let kh = head_slice(&k, h, dh);
        let vh = head_slice(&v, h, dh);
        let mut logits = matmul(&qh, &kh.transpose())?.scale(scale);
        for i in 0..n {
            for j in 0..n {
                if g.adjacency.get(i, j) {
                    if p.use_edge_weights {
                        let l = logits.at(i, j) * g.weights.at(i, j);
                        logits.set(i, j, l);
                    }
                } else {
                    logits.set(i, j, T::neg_infinity());
                }
            }
        }
        // Dense row softmax tolerating -inf entries; fully -inf rows -> zeros.
        let mut probs = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let max = logits
                .row(i)
                .iter()
                .copied()
                .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for j in 0..n {
                let l = logits.at(i, j);
                let e = if l == T::neg_infinity() {
                    T::zero()
                } else {
                    (l - max).exp()
                };
                probs.set(i, j, e);
                sum = sum + e;
            }
            for j in 0..n {
                probs.set(i, j, probs.at(i, j) / sum);
            }
        }
        let oh = matmul(&probs, &vh)?;
        head_place(&mut concat, &oh, h, dh);
    }
    matmul(&concat, &p.wl)
}

// ---------------------------------------------------------------------------
// Max-pooling sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    /// argmax[(frame, pooled_slot, channel)] -> source local row index.
    argmax: Vec<usize>,
    frames: usize,
    grid: usize,
    dim: usize,
}

/// Reduces each frame's `n x n` local grid to `2n` tokens: one coordinatewise
/// max per grid column, then one per grid row, prefixed by the frame's global
/// token. Local cell `(col gx, row gy)` sits at in-frame index `gy * n + gx`.
pub fn maxpool_sample<T: Scalar>(
    x_l2: &Tensor<T>,
    x_g2: &Tensor<T>,
    frames: usize,
    grid: usize,
) -> Result<(Tensor<T>, MaxPoolCache)> {
    let d = x_g2.cols();
    if x_l2.rows() != frames * grid * grid || x_l2.cols() != d || x_g2.rows() != frames {
        return Err(StgtError::ShapeMismatch {
            op: "maxpool_sample",
            left: x_l2.shape().to_vec(),
            right: vec![frames * grid * grid, d],
        });
    }
    let per_frame = 1 + 2 * grid;
    let mut out = Tensor::zeros(&[frames * per_frame, d]);
    let mut argmax = vec![0usize; frames * 2 * grid * d];
    for f in 0..frames {
        let base = f * grid * grid;
        out.row_mut(f * per_frame).copy_from_slice(x_g2.row(f));
        // one pooled vector per grid column: max over the column's cells
        for gx in 0..grid {
            for c in 0..d {
                let mut best = T::neg_infinity();
                let mut best_row = base + gx;
                for gy in 0..grid {
                    let row = base + gy * grid + gx;
                    let v = x_l2.at(row, c);
                    if v > best {
                        best = v;
                        best_row = row;
                    }
                }
                out.set(f * per_frame + 1 + gx, c, best);
                argmax[(f * 2 * grid + gx) * d + c] = best_row;
            }
        }
        // one pooled vector per grid row: max over the row's cells
        for gy in 0..grid {
            for c in 0..d {
                let mut best = T::neg_infinity();
                let mut best_row = base + gy * grid;
                for gx in 0..grid {
                    let row = base + gy * grid + gx;
                    let v = x_l2.at(row, c);
                    if v > best {
                        best = v;
                        best_row = row;
                    }
                }
                out.set(f * per_frame + 1 + grid + gy, c, best);
                argmax[(f * 2 * grid + grid + gy) * d + c] = best_row;
            }
        }
    }
    Ok((
        out,
        MaxPoolCache {
            argmax,
            frames,
            grid,
            dim: d,
        },
    ))
}

pub fn maxpool_backward<T: Scalar>(
    cache: &MaxPoolCache,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (frames, grid, d) = (cache.frames, cache.grid, cache.dim);
    let per_frame = 1 + 2 * grid;
    let mut d_local = Tensor::zeros(&[frames * grid * grid, d]);
    let mut d_global = Tensor::zeros(&[frames, d]);
    for f in 0..frames {
        for (gv, &g) in d_global
            .row_mut(f)
            .iter_mut()
            .zip(d_out.row(f * per_frame))
        {
            *gv = *gv + g;
        }
        for slot in 0..2 * grid {
            for c in 0..d {
                let src = cache.argmax[(f * 2 * grid + slot) * d + c];
                let cur = d_local.at(src, c);
                d_local.set(src, c, cur + d_out.at(f * per_frame + 1 + slot, c));
            }
        }
    }
    (d_local, d_global)
}

// ---------------------------------------------------------------------------
// FLOP accounting for the sparse-vs-dense benchmark
// ---------------------------------------------------------------------------

/// Cost per attended (query, key) pair: dot product, scale + weight, softmax
/// bookkeeping, and the prob-times-value accumulation, summed over heads.
fn per_pair_flops(d: usize, heads: usize) -> u64 {
    (4 * d + 5 * heads) as u64
}

/// Projection cost shared by both paths (Q, K, V and the output projection).
fn projection_flops(n: usize, d: usize) -> u64 {
    8 * (n * d * d) as u64
}

/// Closed-form FLOP count for the sparse path: per-row cost proportional to
/// the row's degree.
pub fn sparse_attention_flops<T: Scalar>(g: &SpatioTemporalGraph<T>, d: usize, heads: usize) -> u64 {
    let edges = g.adjacency.count_ones() as u64;
    projection_flops(g.node_count, d) + edges * per_pair_flops(d, heads)
}

/// Closed-form FLOP count for the dense path: all `N^2` pairs are computed.
pub fn dense_attention_flops(node_count: usize, d: usize, heads: usize) -> u64 {
    projection_flops(node_count, d) + (node_count * node_count) as u64 * per_pair_flops(d, heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::param::{finite_diff_grad, ParamVectorBuilder};
    use crate::tensor::{layer_norm, BitMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor<f64> {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(-amp..amp);
        }
        t
    }

    fn rand_block(rng: &mut ChaCha8Rng, d: usize, hidden: usize, heads: usize) -> BlockParams<f64> {
        BlockParams {
            ln1_gain: (0..d).map(|_| 1.0 + rng.gen_range(-0.1..0.1)).collect(),
            ln1_bias: (0..d).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            attn: AttnParams {
                wq: rand_tensor(rng, &[d, d], 0.4),
                wk: rand_tensor(rng, &[d, d], 0.4),
                wv: rand_tensor(rng, &[d, d], 0.4),
                wo: rand_tensor(rng, &[d, d], 0.4),
            },
            ln2_gain: (0..d).map(|_| 1.0 + rng.gen_range(-0.1..0.1)).collect(),
            ln2_bias: (0..d).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            mlp: MlpParams {
                w1: rand_tensor(rng, &[d, hidden], 0.4),
                b1: (0..hidden).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                w2: rand_tensor(rng, &[hidden, d], 0.4),
                b2: (0..d).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            },
            heads,
        }
    }

    fn rand_graph_attn(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> GraphAttnParams<f64> {
        GraphAttnParams {
            wq: rand_tensor(rng, &[d, d], 0.4),
            wk: rand_tensor(rng, &[d, d], 0.4),
            wv: rand_tensor(rng, &[d, d], 0.4),
            wl: rand_tensor(rng, &[d, d], 0.4),
            heads,
            use_edge_weights: true,
        }
    }

    #[test]
    fn block_zero_params_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, &[5, 8], 1.0);
        let p = BlockParams::zeros(8, 16, 2);
        let (y, _) = transformer_block_forward(&x, &p);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_frame_singleton_sequence() {
        // m=1: softmax over one element is 1, so the attention output is the
        // single token's value projection; residuals stay intact.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 8;
        let p = rand_block(&mut rng, d, 16, 2);
        let x = rand_tensor(&mut rng, &[1, d], 1.0);
        let (y, _) = cross_frame_attention(&x, &p);

        let (a, _) = ln_forward(&x, &p.ln1_gain, &p.ln1_bias);
        let v = matmul(&a, &p.attn.wv).unwrap();
        let msa = matmul(&v, &p.attn.wo).unwrap();
        let x1 = msa.add(&x).unwrap();
        let (b, _) = ln_forward(&x1, &p.ln2_gain, &p.ln2_bias);
        let (f, _) = mlp_forward(&b, &p.mlp);
        let expect = f.add(&x1).unwrap();
        for (got, want) in y.data().iter().zip(expect.data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_frame_matches_composition_oracle() {
        // Step-by-step recomposition from the five primitives.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 8;
        let heads = 2;
        let dh = d / heads;
        let p = rand_block(&mut rng, d, 12, heads);
        let x = rand_tensor(&mut rng, &[4, d], 1.0);
        let (y, _) = cross_frame_attention(&x, &p);

        let a = layer_norm(
            &x,
            &p.ln1_gain,
            &p.ln1_bias,
            LN_EPS,
        )
        .unwrap();
        let q = matmul(&a, &p.attn.wq).unwrap();
        let k = matmul(&a, &p.attn.wk).unwrap();
        let v = matmul(&a, &p.attn.wv).unwrap();
        let mut concat = Tensor::zeros(&[4, d]);
        for h in 0..heads {
            let qh = head_slice(&q, h, dh);
            let kh = head_slice(&k, h, dh);
            let vh = head_slice(&v, h, dh);
            let logits = matmul(&qh, &kh.transpose())
                .unwrap()
                .scale(1.0 / (dh as f64).sqrt());
            let probs = crate::tensor::masked_softmax(&logits, &BitMatrix::ones(4, 4)).unwrap();
            let oh = matmul(&probs, &vh).unwrap();
            head_place(&mut concat, &oh, h, dh);
        }
        let msa = matmul(&concat, &p.attn.wo).unwrap();
        let x1 = msa.add(&x).unwrap();
        let b = layer_norm(&x1, &p.ln2_gain, &p.ln2_bias, LN_EPS).unwrap();
        let mut pre = matmul(&b, &p.mlp.w1).unwrap();
        for i in 0..pre.rows() {
            for (vv, &bb) in pre.row_mut(i).iter_mut().zip(&p.mlp.b1) {
                *vv += bb;
            }
        }
        for vv in pre.data_mut() {
            *vv = gelu(*vv);
        }
        let mut f = matmul(&pre, &p.mlp.w2).unwrap();
        for i in 0..f.rows() {
            for (vv, &bb) in f.row_mut(i).iter_mut().zip(&p.mlp.b2) {
                *vv += bb;
            }
        }
        let expect = f.add(&x1).unwrap();
        for (got, want) in y.data().iter().zip(expect.data()) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    fn graph_for(x: &Tensor<f64>, m: usize, t: usize, h: f64) -> SpatioTemporalGraph<f64> {
        build_graph(x, m, t, h, true).unwrap()
    }

    #[test]
    fn graph_attention_self_loops_only() {
        // A = identity with unit-diagonal weights: each token attends only to
        // itself, so the output is its value row projected by wl.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 8;
        let x = rand_tensor(&mut rng, &[4, d], 1.0);
        let p = rand_graph_attn(&mut rng, d, 2);
        // Build an artificial graph with only self-loops.
        let mut g = graph_for(&x, 2, 2, -1.1);
        g.adjacency = BitMatrix::identity(4);
        g.neighbors = (0..4).map(|i| vec![i]).collect();
        let (y, _) = graph_attention(&x, &g, &p).unwrap();
        let v = matmul(&x, &p.wv).unwrap();
        let expect = matmul(&v, &p.wl).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_attention_uniform_case() {
        // Single frame, all-ones adjacency and weights, zero Q and K: every
        // row attends uniformly, so each output row is mean(V) . wl.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 8;
        let n = 4;
        let x = rand_tensor(&mut rng, &[n, d], 1.0);
        let mut p = rand_graph_attn(&mut rng, d, 2);
        p.wq = Tensor::zeros(&[d, d]);
        p.wk = Tensor::zeros(&[d, d]);
        let mut g = graph_for(&x, 1, n, -1.1);
        g.weights = Tensor::new(vec![1.0; n * n], vec![n, n]).unwrap();
        let (y, _) = graph_attention(&x, &g, &p).unwrap();
        let v = matmul(&x, &p.wv).unwrap();
        let mut mean = Tensor::zeros(&[1, d]);
        for i in 0..n {
            for c in 0..d {
                let cur = mean.at(0, c);
                mean.set(0, c, cur + v.at(i, c) / n as f64);
            }
        }
        let expect = matmul(&mean, &p.wl).unwrap();
        for i in 0..n {
            for c in 0..d {
                assert!((y.at(i, c) - expect.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sparse_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, t, d) = (3, 4, 8);
        let x = rand_tensor(&mut rng, &[m * t, d], 1.0);
        let p = rand_graph_attn(&mut rng, d, 2);
        let g = graph_for(&x, m, t, 0.3);
        let (sparse, _) = graph_attention(&x, &g, &p).unwrap();
        let dense = graph_attention_dense(&x, &g, &p).unwrap();
        for (a, b) in sparse.data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn degree_zero_rows_are_zero_before_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 8;
        let x = rand_tensor(&mut rng, &[4, d], 1.0);
        let p = rand_graph_attn(&mut rng, d, 2);
        let mut g = graph_for(&x, 2, 2, -1.1);
        // isolate node 1
        for j in 0..4 {
            g.adjacency.set(1, j, false);
        }
        g.neighbors[1] = Vec::new();
        let (_, cache) = graph_attention(&x, &g, &p).unwrap();
        assert!(cache.concat.row(1).iter().all(|&v| v == 0.0));
        let dense = graph_attention_dense(&x, &g, &p).unwrap();
        let (y, _) = graph_attention(&x, &g, &p).unwrap();
        for (a, b) in y.data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn graph_locality_two_frames_apart() {
        // Zeroing features of a token in frame 0 cannot change outputs of
        // frame >= 2 tokens once the graph is rebuilt.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, t, d) = (4, 2, 8);
        let mut x = rand_tensor(&mut rng, &[m * t, d], 1.0);
        let p = rand_graph_attn(&mut rng, d, 2);
        let g = graph_for(&x, m, t, 0.1);
        let (base, _) = graph_attention(&x, &g, &p).unwrap();
        for v in x.row_mut(0) {
            *v = 0.0;
        }
        let g2 = graph_for(&x, m, t, 0.1);
        let (changed, _) = graph_attention(&x, &g2, &p).unwrap();
        for row in 2 * t..m * t {
            for c in 0..d {
                assert!(
                    (base.at(row, c) - changed.at(row, c)).abs() < 1e-12,
                    "row {row} in a far frame changed"
                );
            }
        }
    }

    #[test]
    fn fusion_zero_params_is_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 8;
        let xg = rand_tensor(&mut rng, &[2, d], 1.0);
        let xl = rand_tensor(&mut rng, &[6, d], 1.0);
        let p = BlockParams::zeros(d, 16, 2);
        let (y, _) = fuse_global_local(&xg, &xl, &p).unwrap();
        assert_eq!(y.rows(), 8);
        for i in 0..2 {
            assert_eq!(y.row(i), xg.row(i));
        }
        for i in 0..6 {
            assert_eq!(y.row(2 + i), xl.row(i));
        }
    }

    #[test]
    fn fusion_zero_params_permutation_positionwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 8;
        let xg = rand_tensor(&mut rng, &[2, d], 1.0);
        let xl = rand_tensor(&mut rng, &[4, d], 1.0);
        let p = BlockParams::zeros(d, 16, 2);
        let (y, _) = fuse_global_local(&xg, &xl, &p).unwrap();
        // swap local rows 0 and 3
        let mut xl_perm = xl.clone();
        let r0: Vec<f64> = xl.row(0).to_vec();
        let r3: Vec<f64> = xl.row(3).to_vec();
        xl_perm.row_mut(0).copy_from_slice(&r3);
        xl_perm.row_mut(3).copy_from_slice(&r0);
        let (y2, _) = fuse_global_local(&xg, &xl_perm, &p).unwrap();
        assert_eq!(y.row(2 + 0), y2.row(2 + 3));
        assert_eq!(y.row(2 + 3), y2.row(2 + 0));
        assert_eq!(y.row(2 + 1), y2.row(2 + 1));
    }

    #[test]
    fn fusion_matches_block_on_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 8;
        let xg = rand_tensor(&mut rng, &[2, d], 1.0);
        let xl = rand_tensor(&mut rng, &[4, d], 1.0);
        let p = rand_block(&mut rng, d, 12, 2);
        let (y, _) = fuse_global_local(&xg, &xl, &p).unwrap();
        let mut data = xg.data().to_vec();
        data.extend_from_slice(xl.data());
        let x = Tensor::new(data, vec![6, d]).unwrap();
        let (expect, _) = transformer_block_forward(&x, &p);
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn maxpool_degenerate_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 4;
        let xl = rand_tensor(&mut rng, &[2, d], 1.0); // 2 frames, 1x1 grid
        let xg = rand_tensor(&mut rng, &[2, d], 1.0);
        let (y, _) = maxpool_sample(&xl, &xg, 2, 1).unwrap();
        assert_eq!(y.rows(), 2 * 3);
        for f in 0..2 {
            assert_eq!(y.row(f * 3), xg.row(f));
            assert_eq!(y.row(f * 3 + 1), xl.row(f));
            assert_eq!(y.row(f * 3 + 2), xl.row(f));
        }
    }

    #[test]
    fn maxpool_constant_grid() {
        let d = 3;
        let n = 3;
        let xl = Tensor::new(vec![0.7; n * n * d], vec![n * n, d]).unwrap();
        let xg = Tensor::zeros(&[1, d]);
        let (y, _) = maxpool_sample(&xl, &xg, 1, n).unwrap();
        for slot in 1..1 + 2 * n {
            assert!(y.row(slot).iter().all(|&v| v == 0.7));
        }
    }

    #[test]
    fn maxpool_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (m, n, d) = (2, 3, 5);
        let xl = rand_tensor(&mut rng, &[m * n * n, d], 1.0);
        let xg = rand_tensor(&mut rng, &[m, d], 1.0);
        let (y, _) = maxpool_sample(&xl, &xg, m, n).unwrap();
        for f in 0..m {
            let base = f * n * n;
            for gx in 0..n {
                for c in 0..d {
                    let mut best = f64::NEG_INFINITY;
                    for gy in 0..n {
                        best = best.max(xl.at(base + gy * n + gx, c));
                    }
                    assert_eq!(y.at(f * (1 + 2 * n) + 1 + gx, c), best);
                }
            }
            for gy in 0..n {
                for c in 0..d {
                    let mut best = f64::NEG_INFINITY;
                    for gx in 0..n {
                        best = best.max(xl.at(base + gy * n + gx, c));
                    }
                    assert_eq!(y.at(f * (1 + 2 * n) + 1 + n + gy, c), best);
                }
            }
        }
    }

    #[test]
    fn maxpool_column_shuffle_invariance() {
        // Shuffling grid columns leaves the x-max pooled set unchanged as a
        // multiset (here: column pools permute, row pools are invariant).
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, d) = (3, 4);
        let xl = rand_tensor(&mut rng, &[n * n, d], 1.0);
        let xg = Tensor::zeros(&[1, d]);
        let (y, _) = maxpool_sample(&xl, &xg, 1, n).unwrap();
        // permute columns: gx -> (gx + 1) % n
        let mut xl2 = Tensor::zeros(&[n * n, d]);
        for gy in 0..n {
            for gx in 0..n {
                let src = gy * n + gx;
                let dst = gy * n + (gx + 1) % n;
                for c in 0..d {
                    xl2.set(dst, c, xl.at(src, c));
                }
            }
        }
        let (y2, _) = maxpool_sample(&xl2, &xg, 1, n).unwrap();
        // column pools permuted the same way
        for gx in 0..n {
            assert_eq!(y.row(1 + gx), y2.row(1 + (gx + 1) % n));
        }
        // row pools unchanged
        for gy in 0..n {
            assert_eq!(y.row(1 + n + gy), y2.row(1 + n + gy));
        }
    }

    #[test]
    fn flop_counts_sparse_never_exceed_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for &h in &[-1.1, 0.1, 0.5] {
            let x = rand_tensor(&mut rng, &[12, 8], 1.0);
            let g = graph_for(&x, 3, 4, h);
            let sparse = sparse_attention_flops(&g, 8, 2);
            let dense = dense_attention_flops(12, 8, 2);
            assert!(sparse <= dense);
            if g.adjacency.count_ones() < 144 {
                assert!(sparse < dense);
            }
        }
        // equality exactly when every pair is an edge
        let x = rand_tensor(&mut rng, &[4, 8], 1.0);
        let mut g = graph_for(&x, 2, 2, -1.1);
        assert_eq!(g.adjacency.count_ones(), 16); // m=2: mask is all ones
        assert_eq!(
            sparse_attention_flops(&g, 8, 2),
            dense_attention_flops(4, 8, 2)
        );
        g.adjacency.set(0, 3, false);
        assert!(sparse_attention_flops(&g, 8, 2) < dense_attention_flops(4, 8, 2));
    }

    // ---- gradient checks against the finite-difference oracle ----

    fn pv_from_block(p: &BlockParams<f64>) -> crate::param::ParamVector<f64> {
        let mut b = ParamVectorBuilder::new();
        register_block(&mut b, "blk", p);
        b.build()
    }

    #[test]
    fn transformer_block_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let d = 6;
        let p = rand_block(&mut rng, d, 8, 2);
        let x = rand_tensor(&mut rng, &[4, d], 1.0);
        let probe = rand_tensor(&mut rng, &[4, d], 1.0);
        let pv = pv_from_block(&p);

        let loss = |pv: &crate::param::ParamVector<f64>| {
            let p = block_from_pv(pv, "blk", 2);
            let (y, _) = transformer_block_forward(&x, &p);
            y.data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd = finite_diff_grad(loss, &pv, 1e-6).unwrap();

        let (y, cache) = transformer_block_forward(&x, &p);
        let _ = y;
        let (_, grads) = transformer_block_backward(&p, &cache, &probe);
        let mut gb = pv.zeros_like();
        accumulate_block(&mut gb, "blk", &grads);
        for (i, (a, f)) in gb.data().iter().zip(&fd).enumerate() {
            assert!(
                (a - f).abs() < 1e-5 * (1.0 + f.abs()),
                "param coord {i}: analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn transformer_block_input_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 6;
        let p = rand_block(&mut rng, d, 8, 2);
        let x = rand_tensor(&mut rng, &[3, d], 1.0);
        let probe = rand_tensor(&mut rng, &[3, d], 1.0);
        let mut b = ParamVectorBuilder::new();
        b.push("x", &[3, d], x.data().to_vec());
        let pv = b.build();
        let loss = |pv: &crate::param::ParamVector<f64>| {
            let xx = pv.tensor("x");
            let (y, _) = transformer_block_forward(&xx, &p);
            y.data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd = finite_diff_grad(loss, &pv, 1e-6).unwrap();
        let (_, cache) = transformer_block_forward(&x, &p);
        let (dx, _) = transformer_block_backward(&p, &cache, &probe);
        for (a, f) in dx.data().iter().zip(&fd) {
            assert!((a - f).abs() < 1e-5 * (1.0 + f.abs()));
        }
    }

    #[test]
    fn graph_attention_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (m, t, d) = (2, 2, 6);
        let x = rand_tensor(&mut rng, &[m * t, d], 1.0);
        let p = rand_graph_attn(&mut rng, d, 2);
        let g = graph_for(&x, m, t, 0.1);
        let probe = rand_tensor(&mut rng, &[m * t, d], 1.0);

        let mut b = ParamVectorBuilder::new();
        register_graph_attn(&mut b, "ga", &p);
        b.push("x", &[m * t, d], x.data().to_vec());
        let pv = b.build();

        // The graph (adjacency AND weights) is held fixed here; the weight
        // matrix gradient is checked separately below.
        let loss = |pv: &crate::param::ParamVector<f64>| {
            let pp = graph_attn_from_pv(pv, "ga", 2, true);
            let xx = pv.tensor("x");
            let (y, _) = graph_attention(&xx, &g, &pp).unwrap();
            y.data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd = finite_diff_grad(loss, &pv, 1e-6).unwrap();
        let (_, cache) = graph_attention(&x, &g, &p).unwrap();
        let (dx, grads, _) = graph_attention_backward(&g, &p, &cache, &probe);
        let mut gb = pv.zeros_like();
        accumulate_graph_attn(&mut gb, "ga", &grads);
        gb.accumulate("x", dx.data());
        for (i, (a, f)) in gb.data().iter().zip(&fd).enumerate() {
            assert!(
                (a - f).abs() < 1e-5 * (1.0 + f.abs()),
                "coord {i}: analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn graph_attention_weight_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (m, t, d) = (2, 2, 6);
        let x = rand_tensor(&mut rng, &[m * t, d], 1.0);
        let p = rand_graph_attn(&mut rng, d, 2);
        let g = graph_for(&x, m, t, 0.1);
        let probe = rand_tensor(&mut rng, &[m * t, d], 1.0);
        let n = m * t;

        let mut b = ParamVectorBuilder::new();
        b.push("w", &[n, n], g.weights.data().to_vec());
        let pv = b.build();
        let loss = |pv: &crate::param::ParamVector<f64>| {
            let mut gg = g.clone();
            gg.weights = pv.tensor("w");
            let (y, _) = graph_attention(&x, &gg, &p).unwrap();
            y.data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd = finite_diff_grad(loss, &pv, 1e-6).unwrap();
        let (_, cache) = graph_attention(&x, &g, &p).unwrap();
        let (_, _, dws) = graph_attention_backward(&g, &p, &cache, &probe);
        for (i, (a, f)) in dws.data().iter().zip(&fd).enumerate() {
            assert!(
                (a - f).abs() < 1e-5 * (1.0 + f.abs()),
                "weight coord {i}: analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (m, n, d) = (1, 2, 3);
        let xl = rand_tensor(&mut rng, &[m * n * n, d], 1.0);
        let xg = rand_tensor(&mut rng, &[m, d], 1.0);
        let probe = rand_tensor(&mut rng, &[m * (1 + 2 * n), d], 1.0);

        let mut b = ParamVectorBuilder::new();
        b.push("xl", &[m * n * n, d], xl.data().to_vec());
        b.push("xg", &[m, d], xg.data().to_vec());
        let pv = b.build();
        let loss = |pv: &crate::param::ParamVector<f64>| {
            let (y, _) =
                maxpool_sample(&pv.tensor("xl"), &pv.tensor("xg"), m, n).unwrap();
            y.data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd = finite_diff_grad(loss, &pv, 1e-6).unwrap();
        let (_, cache) = maxpool_sample(&xl, &xg, m, n).unwrap();
        let (dl, dg) = maxpool_backward(&cache, &probe);
        let mut gb = pv.zeros_like();
        gb.accumulate("xl", dl.data());
        gb.accumulate("xg", dg.data());
        for (a, f) in gb.data().iter().zip(&fd) {
            assert!((a - f).abs() < 1e-6 * (1.0 + f.abs()));
        }
    }
}
