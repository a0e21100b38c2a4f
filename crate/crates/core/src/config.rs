//! One document describing a run: data, model, losses, optimizer, training
//! schedule, sampler, encoder and evaluation settings.

use std::path::PathBuf;

use ppd_tensor::AdamW;
use serde::{Deserialize, Serialize};

use crate::dit::ModelConfig;
use crate::encoder::EncoderConfig;
use crate::error::{CoreError, Result};
use crate::flow::{LossConfig, SamplerSchedule};
use crate::metrics::CannyParams;
use crate::synth::{validate_ratios, SceneSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding `train.csv`, `val.csv` and `test.csv`.
    pub dir: PathBuf,
    pub count: usize,
    pub ratios: [f64; 3],
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: PathBuf::from("data"), count: 640, ratios: [0.8, 0.1, 0.1], scene: SceneSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Linear ramp from 0 to `lr` over this many steps.
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamW::default();
        OptimConfig { lr: a.lr, schedule: LrSchedule::Constant, warmup_steps: 0, beta1: a.beta1, beta2: a.beta2, eps: a.eps, weight_decay: a.weight_decay }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay to zero at the final training step.
    Cosine,
}

impl OptimConfig {
    /// Learning rate for the 0-based `step` of a run of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let warm = if step < self.warmup_steps { (step + 1) as f64 / self.warmup_steps as f64 } else { 1.0 };
        let decay = match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let k = step.saturating_sub(self.warmup_steps) as f64 / span;
                0.5 * (1.0 + (std::f64::consts::PI * k.min(1.0)).cos())
            }
        };
        self.lr * warm * decay
    }

    pub fn adamw(&self) -> AdamW {
        AdamW { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(CoreError::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    /// Validation cadence in steps; 0 disables periodic validation.
    pub val_every: u64,
    /// Validation images per evaluation; 0 means the whole split.
    pub val_limit: usize,
    pub out_dir: PathBuf,
    /// Frozen encoder checkpoint; required when the model uses semantics.
    pub encoder: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10_000,
            batch_size: 4,
            checkpoint_every: 1000,
            val_every: 1000,
            val_limit: 0,
            out_dir: PathBuf::from("runs/default"),
            encoder: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub canny: CannyParams,
    /// Log-depth span used when exporting relative depth from a normalized
    /// prediction that has no statistics of its own.
    pub log_span: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { canny: CannyParams::default(), log_span: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Fixed reduction order for bitwise-reproducible runs.
    pub strict: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub encoder: EncoderConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            strict: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            encoder: EncoderConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.encoder.validate()?;
        self.data.scene.validate()?;
        validate_ratios(self.data.ratios)?;
        SamplerSchedule::uniform(self.sampler.steps)?;
        if self.train.batch_size == 0 || self.train.checkpoint_every == 0 {
            return Err(CoreError::Config("batch_size and checkpoint_every must be positive".into()));
        }
        if self.data.count == 0 {
            return Err(CoreError::Config("data.count must be positive".into()));
        }
        if self.model.semantic && self.model.semantic_dim != self.encoder.dim {
            return Err(CoreError::Config(format!(
                "model.semantic_dim {} differs from encoder.dim {}",
                self.model.semantic_dim, self.encoder.dim
            )));
        }
        if !(self.eval.log_span > 0.0) {
            return Err(CoreError::Config("eval.log_span must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<SamplerSchedule> {
        SamplerSchedule::uniform(self.sampler.steps)
    }
}
