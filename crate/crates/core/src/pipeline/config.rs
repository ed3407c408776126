use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::renderer::RenderOptions;
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: Real,
    pub lambda_diff: Real,
    pub lambda_temporal: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_diff: 0.1,
            lambda_temporal: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rec, self.lambda_diff, self.lambda_temporal];
        if !all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.lambda_rec <= 0.0 {
            return Err(Error::invalid("lambda_rec must be positive"));
        }
        Ok(())
    }
}

/// Everything a training or pretraining run needs. Serialized as the JSON
/// config file; every field is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Where checkpoints and metrics are written.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Checkpoint to start from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    pub lr: Real,
    /// Learning rate of the nine feature planes; `lr` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plane_lr: Option<Real>,
    /// Learning rates decay exponentially to this fraction of their start
    /// value over the run; 1 keeps them constant.
    pub final_lr_factor: Real,
    /// Frames per step, split evenly over two consecutive times.
    pub batch_size: usize,
    pub steps: usize,
    pub pretrain_steps: usize,
    pub rays_per_frame: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Render from the refined planes rather than the stored ones.
    pub refined_render: bool,
    /// Stratified depth jitter during training.
    pub stratified: bool,
    /// Steps between metric records.
    pub metric_every: usize,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub render: RenderOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            resume: None,
            lr: 5e-4,
            plane_lr: None,
            final_lr_factor: 1.0,
            batch_size: 4,
            steps: 5000,
            pretrain_steps: 2000,
            rays_per_frame: 256,
            seed: 0,
            ablation: Ablation::default(),
            refined_render: true,
            stratified: true,
            metric_every: 100,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            render: RenderOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.out, &mut cfg.resume].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.model.validate()?;
        self.render.validate()?;
        let lrs = [Some(self.lr), self.plane_lr];
        if !lrs.iter().flatten().all(|lr| lr.is_finite() && *lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.final_lr_factor > 0.0 && self.final_lr_factor <= 1.0) {
            return Err(Error::invalid("final_lr_factor must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.rays_per_frame == 0 || self.metric_every == 0 {
            return Err(Error::invalid("batch_size, rays_per_frame and metric_every must be positive"));
        }
        Ok(())
    }

    /// Renders with the refined planes.
    pub fn uses_refinement(&self) -> bool {
        self.refined_render && !self.ablation.no_diffusion
    }

    /// The config without its file-system paths, as stored in checkpoints.
    pub fn portable(&self) -> Self {
        Self {
            data: None,
            out: None,
            resume: None,
            ..self.clone()
        }
    }

    /// Multiplier on every learning rate at `step` of a `total`-step run.
    pub fn lr_decay(&self, step: usize, total: usize) -> Real {
        if total <= 1 || self.final_lr_factor == 1.0 {
            return 1.0;
        }
        self.final_lr_factor.powf(step as Real / (total - 1) as Real)
    }

    pub fn learning_rate(&self, param: &str, plane_names: &[String]) -> Real {
        match self.plane_lr {
            Some(lr) if plane_names.iter().any(|n| n == param) => lr,
            _ => self.lr,
        }
    }
}
