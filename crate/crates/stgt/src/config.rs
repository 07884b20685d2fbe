//! Run configuration: one TOML file covering every tunable, with strict
//! validation (unknown keys are rejected) and a documented precedence chain:
//! built-in defaults < config file < `STGT_SEED`/`STGT_OUT_DIR` environment
//! variables < command-line flags. The fully resolved config is serialized
//! back out verbatim into every report for provenance.

use crate::data::CorpusConfig;
use crate::error::{Result, StgtError};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// f64 for verification runs, f32 for the benchmark path
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub frames: usize,
    pub grid: usize,
    pub dim: usize,
    pub embed_dim: usize,
    pub patch_dim: usize,
    pub text_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// edge-creation threshold while training
    pub threshold_train: f64,
    /// edge-creation threshold for standalone evaluation
    pub threshold_eval: f64,
    pub normalize_similarity: bool,
    pub use_edge_weights: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// corpus size; training is full-batch so this is also the batch size
    pub count: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub distractor_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub learning_rate: f64,
    pub cosine_decay: bool,
    pub gamma: f64,
    /// loss mix in stage 2: 0 = soft-target alignment, 1 = stay contrastive
    pub stage2_alpha: f64,
    pub use_moments: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub moment_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// evaluate at the training threshold instead of `threshold_eval`
    pub at_train_threshold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub frames: usize,
    pub grid: usize,
    pub dim: usize,
    pub heads: usize,
    pub repeats: usize,
    pub thresholds: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            precision: Precision::F64,
            out_dir: PathBuf::from("out"),
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::small();
        Self {
            frames: m.frames,
            grid: m.grid,
            dim: m.dim,
            embed_dim: m.embed_dim,
            patch_dim: m.patch_dim,
            text_dim: m.text_dim,
            heads: m.heads,
            mlp_hidden: m.mlp_hidden,
            threshold_train: 0.1,
            threshold_eval: 0.5,
            normalize_similarity: m.normalize_similarity,
            use_edge_weights: m.use_edge_weights,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            count: 64,
            latent_dim: 8,
            noise_sigma: 0.05,
            distractor_cells: 0,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::small();
        Self {
            stage1_steps: t.stage1_steps,
            stage2_steps: t.stage2_steps,
            learning_rate: t.learning_rate,
            cosine_decay: t.cosine_decay,
            gamma: t.gamma,
            stage2_alpha: t.stage2_alpha,
            use_moments: t.use_moments,
            beta1: t.beta1,
            beta2: t.beta2,
            moment_eps: t.moment_eps,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            at_train_threshold: true,
        }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            frames: 4,
            grid: 8,
            dim: 32,
            heads: 2,
            repeats: 3,
            thresholds: vec![-1.1, 0.1, 0.3, 0.5, 0.7],
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| StgtError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            StgtError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    /// Resolved config as TOML, embedded in every report.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the environment overrides. `get` is injected for testability;
    /// pass [`std::env::var`]-backed lookup in production.
    pub fn apply_env<F: Fn(&str) -> Option<String>>(&mut self, get: F) -> Result<()> {
        if let Some(v) = get("STGT_SEED") {
            self.seed = v
                .parse()
                .map_err(|_| StgtError::Config(format!("STGT_SEED must be an integer, got {v:?}")))?;
        }
        if let Some(v) = get("STGT_OUT_DIR") {
            self.out_dir = PathBuf::from(v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(self.model.threshold_train).validate()?;
        if self.train.gamma <= 0.0 {
            return Err(StgtError::Config(format!(
                "gamma must be positive, got {}",
                self.train.gamma
            )));
        }
        if self.train.stage2_alpha != 0.0 && self.train.stage2_alpha != 1.0 {
            return Err(StgtError::Config(format!(
                "stage2_alpha must be 0 or 1, got {}",
                self.train.stage2_alpha
            )));
        }
        if self.train.learning_rate < 0.0 {
            return Err(StgtError::Config("learning_rate must be nonnegative".into()));
        }
        if self.eval.ks.is_empty() {
            return Err(StgtError::Config("eval.ks must not be empty".into()));
        }
        if self.bench.thresholds.is_empty() {
            return Err(StgtError::Config("bench.thresholds must not be empty".into()));
        }
        if self.bench.repeats == 0 {
            return Err(StgtError::Config("bench.repeats must be >= 1".into()));
        }
        if self.data.count < 2 {
            return Err(StgtError::Config("data.count must be >= 2".into()));
        }
        if self.data.distractor_cells >= self.model.grid * self.model.grid {
            return Err(StgtError::Config(
                "distractor_cells must leave at least one signal cell".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, threshold: f64) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            frames: m.frames,
            grid: m.grid,
            dim: m.dim,
            embed_dim: m.embed_dim,
            patch_dim: m.patch_dim,
            text_dim: m.text_dim,
            heads: m.heads,
            mlp_hidden: m.mlp_hidden,
            threshold,
            normalize_similarity: m.normalize_similarity,
            use_edge_weights: m.use_edge_weights,
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            count: self.data.count,
            latent_dim: self.data.latent_dim,
            frames: self.model.frames,
            grid: self.model.grid,
            patch_dim: self.model.patch_dim,
            text_dim: self.model.text_dim,
            noise_sigma: self.data.noise_sigma,
            distractor_cells: self.data.distractor_cells,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stage1_steps: t.stage1_steps,
            stage2_steps: t.stage2_steps,
            learning_rate: t.learning_rate,
            cosine_decay: t.cosine_decay,
            gamma: t.gamma,
            stage2_alpha: t.stage2_alpha,
            use_moments: t.use_moments,
            beta1: t.beta1,
            beta2: t.beta2,
            moment_eps: t.moment_eps,
            checkpoint_dir,
        }
    }

    /// Threshold used for retrieval evaluation.
    pub fn eval_threshold(&self) -> f64 {
        if self.eval.at_train_threshold {
            self.model.threshold_train
        } else {
            self.model.threshold_eval
        }
    }
}
