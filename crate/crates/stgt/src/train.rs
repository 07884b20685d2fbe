//! Two-stage full-batch training: stage 1 optimizes the contrastive loss,
//! stage 2 continues with the soft-target alignment loss. Plain gradient
//! descent by default (optionally Adam-style moments), cosine step-size
//! decay, binary checkpoints at stage boundaries.

use crate::data::SyntheticCorpus;
use crate::error::{Result, StgtError};
use crate::loss::{total_loss, EmbeddingPair, LossReport};
use crate::model::Model;
use crate::param::{ParamVector, ParamVectorBuilder};
use crate::tensor::{l2_norm, Tensor};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub learning_rate: f64,
    pub cosine_decay: bool,
    pub gamma: f64,
    /// Loss mix in stage 2: 0 trains on the soft-target alignment loss
    /// (the default), 1 keeps the contrastive loss for ablations.
    pub stage2_alpha: f64,
    /// Adam-style first/second moments instead of plain gradient descent.
    pub use_moments: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub moment_eps: f64,
    /// Where stage-boundary checkpoints go; kept in memory when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn small() -> Self {
        Self {
            stage1_steps: 150,
            stage2_steps: 75,
            learning_rate: 0.01,
            cosine_decay: true,
            gamma: 8.0,
            stage2_alpha: 0.0,
            use_moments: true,
            beta1: 0.9,
            beta2: 0.999,
            moment_eps: 1e-8,
            checkpoint_dir: None,
        }
    }
}

/// One line of the loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    pub alpha: f64,
    pub vtc: f64,
    pub csal: f64,
    pub total: f64,
    pub tau: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
}

impl StepRecord {
    /// Delimited record matching [`curve_header`].
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}",
            self.step,
            self.stage,
            self.alpha,
            self.vtc,
            self.csal,
            self.total,
            self.tau,
            self.grad_norm,
            self.learning_rate
        )
    }
}

pub fn curve_header() -> &'static str {
    "step\tstage\talpha\tvtc\tcsal\ttotal\ttau\tgrad_norm\tlearning_rate"
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<StepRecord>,
    /// parameters at the stage-1/stage-2 boundary and at the end
    pub stage_checkpoints: Vec<ParamVector<f64>>,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// Full-batch loss and gradient over the whole corpus.
pub fn corpus_step(
    model: &Model,
    corpus: &SyntheticCorpus,
    alpha: f64,
    gamma: f64,
) -> Result<(LossReport<f64>, ParamVector<f64>)> {
    let b = corpus.items.len();
    let e = model.cfg.embed_dim;
    let mut video = Tensor::zeros(&[b, e]);
    let mut text = Tensor::zeros(&[b, e]);
    let mut vcaches = Vec::with_capacity(b);
    let mut tcaches = Vec::with_capacity(b);
    for (i, item) in corpus.items.iter().enumerate() {
        let (ve, vc) = model.encode_video(&item.video_patches)?;
        let (te, tc) = model.encode_text(&item.text_features)?;
        video.row_mut(i).copy_from_slice(&ve);
        text.row_mut(i).copy_from_slice(&te);
        vcaches.push(vc);
        tcaches.push(tc);
    }
    let pair = EmbeddingPair {
        video,
        text,
        log_tau: model.params.scalar("log_tau"),
    };
    let report = total_loss(&pair, alpha, gamma, false)?;
    let mut grads = model.params.zeros_like();
    for i in 0..b {
        model.encode_video_backward(&vcaches[i], report.grads.d_video.row(i), &mut grads);
        model.encode_text_backward(&tcaches[i], report.grads.d_text.row(i), &mut grads);
    }
    grads.accumulate("log_tau", &[report.grads.d_log_tau]);
    Ok((report, grads))
}

pub fn train(
    mut model: Model,
    corpus: &SyntheticCorpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.stage1_steps == 0 && cfg.stage2_steps == 0 {
        return Err(StgtError::Config("at least one training step required".into()));
    }
    if cfg.learning_rate < 0.0 {
        return Err(StgtError::Config("learning rate must be nonnegative".into()));
    }
    let total_steps = cfg.stage1_steps + cfg.stage2_steps;
    let mut curve = Vec::with_capacity(total_steps);
    let mut stage_checkpoints = Vec::new();
    let mut checkpoint_paths = Vec::new();
    let mut m1 = model.params.zeros_like();
    let mut m2 = model.params.zeros_like();

    for step in 0..total_steps {
        let stage = if step < cfg.stage1_steps { 1u8 } else { 2u8 };
        let alpha = if stage == 1 { 1.0 } else { cfg.stage2_alpha };
        let (report, grads) = match corpus_step(&model, corpus, alpha, cfg.gamma) {
            Ok(r) => r,
            Err(err) => {
                abort_checkpoint(&model, cfg, step, &mut checkpoint_paths)?;
                return Err(StgtError::Numeric(format!(
                    "training aborted at step {step}: {err}; last-good parameters checkpointed"
                )));
            }
        };
        if !report.total.is_finite() {
            abort_checkpoint(&model, cfg, step, &mut checkpoint_paths)?;
            return Err(StgtError::Numeric(format!(
                "non-finite loss {} at step {step}; last-good parameters checkpointed",
                report.total
            )));
        }
        let lr = if cfg.cosine_decay && total_steps > 1 {
            cfg.learning_rate
                * 0.5
                * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
        } else {
            cfg.learning_rate
        };
        curve.push(StepRecord {
            step,
            stage,
            alpha,
            vtc: report.vtc,
            csal: report.csal,
            total: report.total,
            tau: report.tau,
            grad_norm: l2_norm(grads.data()),
            learning_rate: lr,
        });
        if cfg.use_moments {
            let (b1, b2) = (cfg.beta1, cfg.beta2);
            let t = (step + 1) as i32;
            for i in 0..grads.len() {
                let g = grads.data()[i];
                m1.data_mut()[i] = b1 * m1.data()[i] + (1.0 - b1) * g;
                m2.data_mut()[i] = b2 * m2.data()[i] + (1.0 - b2) * g * g;
                let mh = m1.data()[i] / (1.0 - b1.powi(t));
                let vh = m2.data()[i] / (1.0 - b2.powi(t));
                model.params.data_mut()[i] -= lr * mh / (vh.sqrt() + cfg.moment_eps);
            }
        } else {
            model.params.axpy(-lr, &grads);
        }
        if step + 1 == cfg.stage1_steps || step + 1 == total_steps {
            stage_checkpoints.push(model.params.clone());
            if let Some(dir) = &cfg.checkpoint_dir {
                let name = if step + 1 == total_steps {
                    "final.ckpt".to_string()
                } else {
                    "stage1.ckpt".to_string()
                };
                let path = dir.join(name);
                save_checkpoint(&model.params, &path)?;
                checkpoint_paths.push(path);
            }
        }
    }
    Ok(TrainOutcome {
        model,
        curve,
        stage_checkpoints,
        checkpoint_paths,
    })
}

fn abort_checkpoint(
    model: &Model,
    cfg: &TrainConfig,
    step: usize,
    paths: &mut Vec<PathBuf>,
) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join(format!("abort-step{step}.ckpt"));
        save_checkpoint(&model.params, &path)?;
        paths.push(path);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint format: "STGTCKPT" magic, u32 version, u32 segment count, then
// per segment: u32 name length + UTF-8 name, u32 rank + u64 dims, then all
// values as little-endian f64 in segment order. See the format chapter of
// the guide for a byte-level example.
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STGTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(pv: &ParamVector<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(pv.segments().len() as u32).to_le_bytes());
    for s in pv.segments() {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
        for &d in &s.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for &v in pv.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ParamVector<f64>> {
    let bad = |msg: &str| StgtError::Checkpoint(msg.to_string());
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(bad("truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(StgtError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let nseg = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut names = Vec::with_capacity(nseg);
    let mut shapes = Vec::with_capacity(nseg);
    for _ in 0..nseg {
        let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, nlen)?)
            .map_err(|_| bad("segment name is not UTF-8"))?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        names.push(name);
        shapes.push(shape);
    }
    let mut b = ParamVectorBuilder::new();
    for (name, shape) in names.iter().zip(&shapes) {
        let len: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(len);
        for _ in 0..len {
            vals.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        b.push(name, shape, vals);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after checkpoint payload"));
    }
    Ok(b.build())
}

/// Atomic file write: temp file in the target directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(pv: &ParamVector<f64>, path: &Path) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(pv))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamVector<f64>> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, CorpusConfig};
    use crate::model::ModelConfig;

    fn tiny_setup(seed: u64, count: usize) -> (Model, SyntheticCorpus) {
        let mcfg = ModelConfig {
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
        };
        let ccfg = CorpusConfig {
            count,
            latent_dim: 4,
            frames: 2,
            grid: 2,
            patch_dim: 5,
            text_dim: 5,
            noise_sigma: 0.02,
            distractor_cells: 0,
            seed,
        };
        let model = Model::new(mcfg, seed).unwrap();
        let corpus = gen_corpus(&ccfg).unwrap();
        (model, corpus)
    }

    #[test]
    fn zero_learning_rate_is_a_noop() {
        let (model, corpus) = tiny_setup(7, 4);
        let before = model.params.clone();
        let cfg = TrainConfig {
            stage1_steps: 3,
            stage2_steps: 2,
            learning_rate: 0.0,
            cosine_decay: false,
            ..TrainConfig::small()
        };
        let out = train(model, &corpus, &cfg).unwrap();
        assert_eq!(out.model.params, before);
        // flat loss curve per stage
        assert_eq!(out.curve[0].total, out.curve[1].total);
        assert_eq!(out.curve[3].total, out.curve[4].total);
    }

    #[test]
    fn stage_schedule_flips_alpha_at_boundary() {
        let (model, corpus) = tiny_setup(7, 4);
        let cfg = TrainConfig {
            stage1_steps: 3,
            stage2_steps: 3,
            learning_rate: 0.05,
            ..TrainConfig::small()
        };
        let out = train(model, &corpus, &cfg).unwrap();
        for r in &out.curve[..3] {
            assert_eq!(r.stage, 1);
            assert_eq!(r.alpha, 1.0);
            assert_eq!(r.total, r.vtc);
        }
        for r in &out.curve[3..] {
            assert_eq!(r.stage, 2);
            assert_eq!(r.alpha, 0.0);
            assert_eq!(r.total, r.csal);
        }
        assert_eq!(out.stage_checkpoints.len(), 2);
    }

    #[test]
    fn stage1_loss_decreases_on_small_batch() {
        let (model, corpus) = tiny_setup(7, 8);
        let cfg = TrainConfig {
            stage1_steps: 200,
            stage2_steps: 100,
            learning_rate: 0.3,
            use_moments: false,
            ..TrainConfig::small()
        };
        let out = train(model, &corpus, &cfg).unwrap();
        let first_vtc = out.curve[0].vtc;
        let boundary_vtc = out.curve[cfg.stage1_steps - 1].vtc;
        assert!(
            boundary_vtc < first_vtc,
            "stage-1 vtc did not improve: {first_vtc} -> {boundary_vtc}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            stage1_steps: 5,
            stage2_steps: 5,
            learning_rate: 0.1,
            ..TrainConfig::small()
        };
        let (m1, c1) = tiny_setup(11, 4);
        let (m2, c2) = tiny_setup(11, 4);
        let a = train(m1, &c1, &cfg).unwrap();
        let b = train(m2, &c2, &cfg).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let (model, corpus) = tiny_setup(13, 4);
        let cfg = TrainConfig {
            stage1_steps: 4,
            stage2_steps: 0,
            learning_rate: 0.1,
            ..TrainConfig::small()
        };
        let out = train(model, &corpus, &cfg).unwrap();
        let bytes = checkpoint_bytes(&out.model.params);
        let restored = parse_checkpoint(&bytes).unwrap();
        assert_eq!(restored, out.model.params);
        // the next step from restored parameters is bit-identical
        let mut m2 = out.model.clone();
        m2.params = restored;
        let (r1, g1) = corpus_step(&out.model, &corpus, 1.0, 5.0).unwrap();
        let (r2, g2) = corpus_step(&m2, &corpus, 1.0, 5.0).unwrap();
        assert_eq!(r1.total, r2.total);
        assert_eq!(r1.p_v2t.data(), r2.p_v2t.data());
        assert_eq!(g1, g2);
    }

    #[test]
    fn checkpoint_file_io_roundtrip() {
        let (model, _) = tiny_setup(17, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        save_checkpoint(&model.params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, model.params);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let (model, _) = tiny_setup(19, 4);
        let mut bytes = checkpoint_bytes(&model.params);
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(parse_checkpoint(&bytes).is_err());
        assert!(parse_checkpoint(b"short").is_err());
    }

    #[test]
    fn moments_update_differs_from_plain_descent() {
        let (model, corpus) = tiny_setup(23, 4);
        let cfg_gd = TrainConfig {
            stage1_steps: 5,
            stage2_steps: 0,
            learning_rate: 0.05,
            use_moments: false,
            ..TrainConfig::small()
        };
        let cfg_adam = TrainConfig {
            use_moments: true,
            ..cfg_gd.clone()
        };
        let a = train(model.clone(), &corpus, &cfg_gd).unwrap();
        let b = train(model, &corpus, &cfg_adam).unwrap();
        assert_ne!(a.model.params, b.model.params);
    }
}
