//! The toy two-tower aligner. The video tower runs patch embedding (frozen
//! random map), positional assembly, graph construction, the graph
//! transformer block, max-pool sampling, mean pooling and a projection head;
//! the text tower is a single learnable projection. Both towers have full
//! manual backward passes.

use crate::block::{
    accumulate_block, accumulate_graph_attn, attention_records, block_from_pv, cross_frame_attention,
    fuse_global_local, graph_attention, graph_attention_backward, graph_attn_from_pv,
    maxpool_backward, maxpool_sample, register_block, register_graph_attn, transformer_block_backward,
    AttentionRecord, BlockCache, BlockParams, GraphAttnCache, GraphAttnParams, MaxPoolCache,
};
use crate::embed::{build_spatial_table, SpatialEmbeddingTable};
use crate::error::{Result, StgtError};
use crate::graph::{build_graph, token_similarity_backward, SpatioTemporalGraph};
use crate::loss::TAU_INIT;
use crate::param::{ParamVector, ParamVectorBuilder};
use crate::tensor::{l2_norm, matmul, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Static shape and behavior knobs of the model (not learnable).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// frames per clip (m)
    pub frames: usize,
    /// grid side (n); each frame carries n*n local tokens
    pub grid: usize,
    /// token feature dimension (d); divisible by 4 and by `heads`
    pub dim: usize,
    /// joint embedding dimension (e)
    pub embed_dim: usize,
    /// raw patch feature dimension (p)
    pub patch_dim: usize,
    /// raw text feature dimension (q)
    pub text_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// edge-creation threshold applied to cosine similarities
    pub threshold: f64,
    /// cosine similarity (true) vs raw Gram matrix (false)
    pub normalize_similarity: bool,
    /// multiply kept logits by the similarity weights
    pub use_edge_weights: bool,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn small() -> Self {
        Self {
            frames: 4,
            grid: 4,
            dim: 32,
            embed_dim: 16,
            patch_dim: 12,
            text_dim: 12,
            heads: 2,
            mlp_hidden: 64,
            threshold: 0.1,
            normalize_similarity: true,
            use_edge_weights: true,
        }
    }

    pub fn local_tokens(&self) -> usize {
        self.frames * self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.grid == 0 {
            return Err(StgtError::Config("frames and grid must be >= 1".into()));
        }
        if self.dim % 4 != 0 {
            return Err(StgtError::Config(format!(
                "dim must be divisible by 4 for the 2D positional table, got {}",
                self.dim
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(StgtError::Config(format!(
                "dim {} must be divisible by head count {}",
                self.dim, self.heads
            )));
        }
        if self.embed_dim == 0 || self.patch_dim == 0 || self.text_dim == 0 {
            return Err(StgtError::Config("all dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Seed-derived constants that stand in for the pretrained encoders. They
/// never receive gradients.
#[derive(Debug, Clone)]
pub struct FrozenMaps {
    /// patch feature -> token feature, p x d
    pub patch_map: Tensor<f64>,
    /// per-frame classification token, length d
    pub cls: Vec<f64>,
    pub spatial: SpatialEmbeddingTable<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamVector<f64>,
    pub frozen: FrozenMaps,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], sigma: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, sigma).unwrap();
    (0..shape.iter().product::<usize>())
        .map(|_| dist.sample(rng))
        .collect()
}

/// Builds the parameter vector layout with seeded initial values.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(2).wrapping_add(1));
    let d = cfg.dim;
    let sigma = 0.1 / (d as f64).sqrt();
    let mut b = ParamVectorBuilder::new();
    b.push(
        "temporal",
        &[cfg.frames, d],
        normal_tensor(&mut rng, &[cfg.frames, d], 0.02),
    );
    let ga = GraphAttnParams {
        wq: Tensor::new(normal_tensor(&mut rng, &[d, d], sigma), vec![d, d]).unwrap(),
        wk: Tensor::new(normal_tensor(&mut rng, &[d, d], sigma), vec![d, d]).unwrap(),
        wv: Tensor::new(normal_tensor(&mut rng, &[d, d], sigma), vec![d, d]).unwrap(),
        wl: Tensor::new(normal_tensor(&mut rng, &[d, d], sigma), vec![d, d]).unwrap(),
        heads: cfg.heads,
        use_edge_weights: cfg.use_edge_weights,
    };
    register_graph_attn(&mut b, "graph_attn", &ga);
    for prefix in ["cross_frame", "fusion"] {
        let blk = BlockParams {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            attn: crate::block::AttnParams {
                wq: Tensor::new(normal_tensor(&mut rng, &[d, d], sigma), vec![d, d]).unwrap(),
                wk: Tensor::new(normal_tensor(&mut rng, &[d, d], sigma), vec![d, d]).unwrap(),
                wv: Tensor::new(normal_tensor(&mut rng, &[d, d], sigma), vec![d, d]).unwrap(),
                wo: Tensor::new(normal_tensor(&mut rng, &[d, d], sigma), vec![d, d]).unwrap(),
            },
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            mlp: crate::block::MlpParams {
                w1: Tensor::new(
                    normal_tensor(&mut rng, &[d, cfg.mlp_hidden], sigma),
                    vec![d, cfg.mlp_hidden],
                )
                .unwrap(),
                b1: vec![0.0; cfg.mlp_hidden],
                w2: Tensor::new(
                    normal_tensor(&mut rng, &[cfg.mlp_hidden, d], sigma),
                    vec![cfg.mlp_hidden, d],
                )
                .unwrap(),
                b2: vec![0.0; d],
            },
            heads: cfg.heads,
        };
        register_block(&mut b, prefix, &blk);
    }
    b.push(
        "proj.video.w",
        &[d, cfg.embed_dim],
        normal_tensor(&mut rng, &[d, cfg.embed_dim], 1.0 / (d as f64).sqrt()),
    );
    b.push_zeros("proj.video.b", &[cfg.embed_dim]);
    b.push(
        "proj.text.w",
        &[cfg.text_dim, cfg.embed_dim],
        normal_tensor(
            &mut rng,
            &[cfg.text_dim, cfg.embed_dim],
            1.0 / (cfg.text_dim as f64).sqrt(),
        ),
    );
    b.push("log_tau", &[1], vec![TAU_INIT.ln()]);
    b.build()
}

/// Frozen stand-ins for the pretrained towers, derived from the same seed.
pub fn init_frozen(cfg: &ModelConfig, seed: u64) -> FrozenMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(3).wrapping_add(7));
    let patch_map = Tensor::new(
        normal_tensor(
            &mut rng,
            &[cfg.patch_dim, cfg.dim],
            1.0 / (cfg.patch_dim as f64).sqrt(),
        ),
        vec![cfg.patch_dim, cfg.dim],
    )
    .unwrap();
    let cls = normal_tensor(&mut rng, &[cfg.dim], 0.5);
    let spatial = build_spatial_table(cfg.grid, cfg.dim).expect("dim validated");
    FrozenMaps {
        patch_map,
        cls,
        spatial,
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed);
        let frozen = init_frozen(&cfg, seed);
        Ok(Self {
            cfg,
            params,
            frozen,
        })
    }

    pub fn log_tau(&self) -> f64 {
        self.params.scalar("log_tau")
    }

    fn graph_attn_params(&self) -> GraphAttnParams<f64> {
        graph_attn_from_pv(
            &self.params,
            "graph_attn",
            self.cfg.heads,
            self.cfg.use_edge_weights,
        )
    }

    fn block_params(&self, prefix: &str) -> BlockParams<f64> {
        block_from_pv(&self.params, prefix, self.cfg.heads)
    }

    /// Assembles the per-frame token matrices from raw patches: frozen patch
    /// embedding, the frozen classification token, spatial table on locals,
    /// learnable temporal row on everything. Returns (globals m x d, locals
    /// N x d frame-major).
    fn assemble(&self, patches: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let cfg = &self.cfg;
        let t = cfg.grid * cfg.grid;
        if patches.rows() != cfg.frames * t || patches.cols() != cfg.patch_dim {
            return Err(StgtError::ShapeMismatch {
                op: "encode_video",
                left: patches.shape().to_vec(),
                right: vec![cfg.frames * t, cfg.patch_dim],
            });
        }
        let temporal = self.params.tensor("temporal");
        let tokens = matmul(patches, &self.frozen.patch_map)?;
        let mut x_g = Tensor::zeros(&[cfg.frames, cfg.dim]);
        let mut x_l = Tensor::zeros(&[cfg.frames * t, cfg.dim]);
        for f in 0..cfg.frames {
            for c in 0..cfg.dim {
                x_g.set(f, c, self.frozen.cls[c] + temporal.at(f, c));
            }
            for k in 0..t {
                let row = f * t + k;
                for c in 0..cfg.dim {
                    x_l.set(
                        row,
                        c,
                        tokens.at(row, c) + self.frozen.spatial.table.at(k, c) + temporal.at(f, c),
                    );
                }
            }
        }
        Ok((x_g, x_l))
    }

    /// Full video tower forward. The returned embedding is unit-norm.
    pub fn encode_video(&self, patches: &Tensor<f64>) -> Result<(Vec<f64>, VideoCache)> {
        let cfg = &self.cfg;
        let (x_g, x_l) = self.assemble(patches)?;
        let graph = build_graph(
            &x_l,
            cfg.frames,
            cfg.grid * cfg.grid,
            cfg.threshold,
            cfg.normalize_similarity,
        )?;
        let cf = self.block_params("cross_frame");
        let (x_g2, cf_cache) = cross_frame_attention(&x_g, &cf);
        let ga = self.graph_attn_params();
        let (x_l2, ga_cache) = graph_attention(&x_l, &graph, &ga)?;
        let fu = self.block_params("fusion");
        let (fused, fu_cache) = fuse_global_local(&x_g2, &x_l2, &fu)?;
        let fg = sub_rows(&fused, 0, cfg.frames);
        let fl = sub_rows(&fused, cfg.frames, fused.rows());
        let (pooled, pool_cache) = maxpool_sample(&fl, &fg, cfg.frames, cfg.grid)?;

        let count = pooled.rows();
        let mut mean = vec![0.0; cfg.dim];
        for i in 0..count {
            for (m, &v) in mean.iter_mut().zip(pooled.row(i)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let w = self.params.tensor("proj.video.w");
        let bias = self.params.slice("proj.video.b");
        let mut u = bias.to_vec();
        for c in 0..cfg.dim {
            for (uj, wj) in u.iter_mut().zip(w.row(c)) {
                *uj += mean[c] * wj;
            }
        }
        let r = l2_norm(&u);
        if r < 1e-12 {
            return Err(StgtError::DegenerateEmbedding(
                "video projection collapsed to the zero vector".into(),
            ));
        }
        let emb: Vec<f64> = u.iter().map(|&v| v / r).collect();
        if emb.iter().any(|v| !v.is_finite()) {
            return Err(StgtError::NonFinite {
                context: "encode_video".into(),
                coord: 0,
            });
        }
        Ok((
            emb.clone(),
            VideoCache {
                x_l,
                graph,
                cf_cache,
                ga_cache,
                fu_cache,
                pool_cache,
                pooled_count: count,
                mean,
                norm: r,
                emb,
            },
        ))
    }

    /// Accumulates video-tower gradients for `d L / d embedding` (gradient
    /// with respect to the unit-norm output rows) into `grads`.
    pub fn encode_video_backward(
        &self,
        cache: &VideoCache,
        d_emb: &[f64],
        grads: &mut ParamVector<f64>,
    ) {
        let cfg = &self.cfg;
        // normalize VJP
        let y = &cache.emb;
        let dot: f64 = d_emb.iter().zip(y).map(|(a, b)| a * b).sum();
        let du: Vec<f64> = d_emb
            .iter()
            .zip(y)
            .map(|(g, yv)| (g - dot * yv) / cache.norm)
            .collect();
        // projection head
        let w = self.params.tensor("proj.video.w");
        let mut dw = Tensor::zeros(&[cfg.dim, cfg.embed_dim]);
        for c in 0..cfg.dim {
            for (j, &g) in du.iter().enumerate() {
                dw.set(c, j, cache.mean[c] * g);
            }
        }
        grads.accumulate("proj.video.w", dw.data());
        grads.accumulate("proj.video.b", &du);
        let mut d_mean = vec![0.0; cfg.dim];
        for c in 0..cfg.dim {
            d_mean[c] = du.iter().zip(w.row(c)).map(|(g, wv)| g * wv).sum();
        }
        // mean pool
        let count = cache.pooled_count;
        let mut d_pooled = Tensor::zeros(&[count, cfg.dim]);
        for i in 0..count {
            for c in 0..cfg.dim {
                d_pooled.set(i, c, d_mean[c] / count as f64);
            }
        }
        // max-pool sampling
        let (d_fl, d_fg) = maxpool_backward(&cache.pool_cache, &d_pooled);
        // fusion block over the concatenated rows
        let mut d_fused = Tensor::zeros(&[cfg.frames + d_fl.rows(), cfg.dim]);
        for f in 0..cfg.frames {
            d_fused.row_mut(f).copy_from_slice(d_fg.row(f));
        }
        for i in 0..d_fl.rows() {
            d_fused.row_mut(cfg.frames + i).copy_from_slice(d_fl.row(i));
        }
        let fu = self.block_params("fusion");
        let (d_concat, g_fu) = transformer_block_backward(&fu, &cache.fu_cache, &d_fused);
        accumulate_block(grads, "fusion", &g_fu);
        let d_xg2 = sub_rows(&d_concat, 0, cfg.frames);
        let d_xl2 = sub_rows(&d_concat, cfg.frames, d_concat.rows());
        // the two parallel branches
        let cf = self.block_params("cross_frame");
        let (d_xg, g_cf) = transformer_block_backward(&cf, &cache.cf_cache, &d_xg2);
        accumulate_block(grads, "cross_frame", &g_cf);
        let ga = self.graph_attn_params();
        let (mut d_xl, g_ga, d_ws) =
            graph_attention_backward(&cache.graph, &ga, &cache.ga_cache, &d_xl2);
        accumulate_graph_attn(grads, "graph_attn", &g_ga);
        // edge weights are similarities of the assembled locals
        if cfg.use_edge_weights {
            let d_xl_sim =
                token_similarity_backward(&cache.x_l, &d_ws, cfg.normalize_similarity);
            d_xl.add_assign(&d_xl_sim);
        }
        // assembly: every token of frame f carries +temporal[f]
        let t = cfg.grid * cfg.grid;
        let mut d_temporal = Tensor::zeros(&[cfg.frames, cfg.dim]);
        for f in 0..cfg.frames {
            for c in 0..cfg.dim {
                let mut g = d_xg.at(f, c);
                for k in 0..t {
                    g += d_xl.at(f * t + k, c);
                }
                d_temporal.set(f, c, g);
            }
        }
        grads.accumulate("temporal", d_temporal.data());
        // patch map, classification token and spatial table are frozen
    }

    /// Text tower: learnable linear map then unit normalization.
    pub fn encode_text(&self, features: &[f64]) -> Result<(Vec<f64>, TextCache)> {
        let cfg = &self.cfg;
        if features.len() != cfg.text_dim {
            return Err(StgtError::ShapeMismatch {
                op: "encode_text",
                left: vec![features.len()],
                right: vec![cfg.text_dim],
            });
        }
        let w = self.params.tensor("proj.text.w");
        let mut u = vec![0.0; cfg.embed_dim];
        for c in 0..cfg.text_dim {
            for (uj, wj) in u.iter_mut().zip(w.row(c)) {
                *uj += features[c] * wj;
            }
        }
        let r = l2_norm(&u);
        if r < 1e-12 {
            return Err(StgtError::DegenerateEmbedding(
                "text projection maps the features to the zero vector".into(),
            ));
        }
        let emb: Vec<f64> = u.iter().map(|&v| v / r).collect();
        Ok((
            emb.clone(),
            TextCache {
                features: features.to_vec(),
                norm: r,
                emb,
            },
        ))
    }

    pub fn encode_text_backward(
        &self,
        cache: &TextCache,
        d_emb: &[f64],
        grads: &mut ParamVector<f64>,
    ) {
        let cfg = &self.cfg;
        let dot: f64 = d_emb.iter().zip(&cache.emb).map(|(a, b)| a * b).sum();
        let du: Vec<f64> = d_emb
            .iter()
            .zip(&cache.emb)
            .map(|(g, yv)| (g - dot * yv) / cache.norm)
            .collect();
        let mut dw = Tensor::zeros(&[cfg.text_dim, cfg.embed_dim]);
        for c in 0..cfg.text_dim {
            for (j, &g) in du.iter().enumerate() {
                dw.set(c, j, cache.features[c] * g);
            }
        }
        grads.accumulate("proj.text.w", dw.data());
    }

    /// Kept-attention probabilities from the video tower's graph attention.
    pub fn video_attention_records(&self, cache: &VideoCache) -> Vec<AttentionRecord<f64>> {
        attention_records(&cache.graph, &cache.ga_cache)
    }
}

#[derive(Debug, Clone)]
pub struct VideoCache {
    pub x_l: Tensor<f64>,
    pub graph: SpatioTemporalGraph<f64>,
    cf_cache: BlockCache<f64>,
    ga_cache: GraphAttnCache<f64>,
    fu_cache: BlockCache<f64>,
    pool_cache: MaxPoolCache,
    pooled_count: usize,
    mean: Vec<f64>,
    norm: f64,
    pub emb: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TextCache {
    features: Vec<f64>,
    norm: f64,
    pub emb: Vec<f64>,
}

fn sub_rows(t: &Tensor<f64>, from: usize, to: usize) -> Tensor<f64> {
    let d = t.cols();
    let mut out = Tensor::zeros(&[to - from, d]);
    for i in from..to {
        out.row_mut(i - from).copy_from_slice(t.row(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            frames: 2,
            grid: 2,
            dim: 8,
            embed_dim: 4,
            patch_dim: 5,
            text_dim: 5,
            heads: 2,
            mlp_hidden: 8,
            threshold: 0.1,
            normalize_similarity: true,
            use_edge_weights: true,
        }
    }

    fn rand_patches(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(&[cfg.local_tokens(), cfg.patch_dim]);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn video_embedding_is_unit_norm_and_deterministic() {
        let model = Model::new(tiny_cfg(), 3).unwrap();
        let patches = rand_patches(&model.cfg, 1);
        let (a, _) = model.encode_video(&patches).unwrap();
        let (b, _) = model.encode_video(&patches).unwrap();
        assert_eq!(a, b);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_transformer_params_reduce_to_pooled_global_head() {
        // With all transformer weights zero: the cross-frame block is the
        // identity, graph attention outputs zeros (its output projection is
        // zero), and fusion is the identity on the concatenation. The pooled
        // set is then [global, zeros...] per frame, so the embedding is
        // normalize((sum of globals / pooled_count) . W + b).
        let cfg = tiny_cfg();
        let mut model = Model::new(cfg.clone(), 3).unwrap();
        for prefix in [
            "graph_attn.wq",
            "graph_attn.wk",
            "graph_attn.wv",
            "graph_attn.wl",
        ] {
            for v in model.params.slice_mut(prefix) {
                *v = 0.0;
            }
        }
        for blk in ["cross_frame", "fusion"] {
            for seg in [
                "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain",
                "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
            ] {
                for v in model.params.slice_mut(&format!("{blk}.{seg}")) {
                    *v = 0.0;
                }
            }
        }
        let patches = rand_patches(&cfg, 2);
        let (emb, cache) = model.encode_video(&patches).unwrap();

        let temporal = model.params.tensor("temporal");
        let count = (cfg.frames * (1 + 2 * cfg.grid)) as f64;
        let mut mean = vec![0.0; cfg.dim];
        for f in 0..cfg.frames {
            for c in 0..cfg.dim {
                mean[c] += (model.frozen.cls[c] + temporal.at(f, c)) / count;
            }
        }
        let w = model.params.tensor("proj.video.w");
        let bias = model.params.slice("proj.video.b");
        let mut u = bias.to_vec();
        for c in 0..cfg.dim {
            for (uj, wj) in u.iter_mut().zip(w.row(c)) {
                *uj += mean[c] * wj;
            }
        }
        let r = l2_norm(&u);
        for (a, b) in emb.iter().zip(u.iter().map(|v| v / r)) {
            assert!((a - b).abs() < 1e-12);
        }
        let _ = cache;
    }

    #[test]
    fn patch_perturbation_sensitivity_is_bounded() {
        // Finite-difference sensitivity of the embedding to one patch entry
        // stays bounded as the perturbation shrinks (no blow-up through the
        // stack of smooth layers plus piecewise max/threshold selections).
        let model = Model::new(tiny_cfg(), 5).unwrap();
        let patches = rand_patches(&model.cfg, 7);
        let (base, _) = model.encode_video(&patches).unwrap();
        let mut prev_ratio = f64::INFINITY;
        for &eps in &[1e-3, 1e-4, 1e-5] {
            let mut p = patches.clone();
            let v = p.at(3, 2);
            p.set(3, 2, v + eps);
            let (e, _) = model.encode_video(&p).unwrap();
            let delta: f64 = e
                .iter()
                .zip(&base)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let ratio = delta / eps;
            assert!(ratio < 1e3, "sensitivity {ratio} at eps {eps}");
            // ratios converge to the directional derivative norm
            assert!(ratio < prev_ratio * 1.5 + 1e-9);
            prev_ratio = ratio;
        }
    }

    #[test]
    fn text_tower_matches_matmul_normalize_oracle() {
        let model = Model::new(tiny_cfg(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feat: Vec<f64> = (0..model.cfg.text_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let (emb, _) = model.encode_text(&feat).unwrap();
        let w = model.params.tensor("proj.text.w");
        let u = matmul(
            &Tensor::new(feat.clone(), vec![1, model.cfg.text_dim]).unwrap(),
            &w,
        )
        .unwrap();
        let r = l2_norm(u.row(0));
        for (a, b) in emb.iter().zip(u.row(0).iter().map(|v| v / r)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn text_tower_identity_map_normalizes_features() {
        let mut cfg = tiny_cfg();
        cfg.text_dim = cfg.embed_dim;
        let mut model = Model::new(cfg.clone(), 11).unwrap();
        {
            let w = model.params.slice_mut("proj.text.w");
            for v in w.iter_mut() {
                *v = 0.0;
            }
            for i in 0..cfg.embed_dim {
                w[i * cfg.embed_dim + i] = 1.0;
            }
        }
        let feat = vec![3.0, 0.0, -4.0, 0.0];
        let (emb, _) = model.encode_text(&feat).unwrap();
        assert_eq!(emb, vec![0.6, 0.0, -0.8, 0.0]);
    }

    #[test]
    fn text_tower_rejects_zero_direction() {
        let mut model = Model::new(tiny_cfg(), 11).unwrap();
        for v in model.params.slice_mut("proj.text.w") {
            *v = 0.0;
        }
        let feat = vec![1.0; model.cfg.text_dim];
        assert!(matches!(
            model.encode_text(&feat),
            Err(StgtError::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn video_tower_gradient_matches_fd() {
        // End-to-end through the full video tower against central
        // differences on every learnable parameter.
        let model = Model::new(tiny_cfg(), 13).unwrap();
        let patches = rand_patches(&model.cfg, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let probe: Vec<f64> = (0..model.cfg.embed_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        let f = |pv: &ParamVector<f64>| {
            let mut m = model.clone();
            m.params = pv.clone();
            let (emb, _) = m.encode_video(&patches).unwrap();
            emb.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = crate::param::finite_diff_grad(f, &model.params, 1e-6).unwrap();
        let (_, cache) = model.encode_video(&patches).unwrap();
        let mut grads = model.params.zeros_like();
        model.encode_video_backward(&cache, &probe, &mut grads);
        let errs = crate::param::segment_relative_errors(&model.params, grads.data(), &fd);
        for (name, err) in errs {
            // segments untouched by the video tower have zero/zero errors
            assert!(err < 1e-5, "segment {name}: rel err {err}");
        }
    }

    #[test]
    fn text_tower_gradient_matches_fd() {
        let model = Model::new(tiny_cfg(), 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let feat: Vec<f64> = (0..model.cfg.text_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let probe: Vec<f64> = (0..model.cfg.embed_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let f = |pv: &ParamVector<f64>| {
            let mut m = model.clone();
            m.params = pv.clone();
            let (emb, _) = m.encode_text(&feat).unwrap();
            emb.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = crate::param::finite_diff_grad(f, &model.params, 1e-6).unwrap();
        let (_, cache) = model.encode_text(&feat).unwrap();
        let mut grads = model.params.zeros_like();
        model.encode_text_backward(&cache, &probe, &mut grads);
        for (a, f) in grads.data().iter().zip(&fd) {
            assert!((a - f).abs() < 1e-7 * (1.0 + f.abs()));
        }
    }
}
