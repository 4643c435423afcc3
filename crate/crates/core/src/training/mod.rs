//! Set-prediction training: Hungarian matching, smoothed score supervision,
//! mosaic sampling, and the AdamW epoch loop under a cosine schedule.

mod check;
mod hungarian;
mod loss;
mod mosaic;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::TensorError;
use crate::boxgeom::BoxError;
use crate::dataset::DatasetError;
use crate::decoder::DecoderError;
use crate::encoder::EncoderError;
use crate::querying::{QueryError, QueryMode};

pub use check::{composition_gradcheck, tiny_decoder_config};
pub use hungarian::{hungarian, MatchResult};
pub use loss::{build_cost, high_quality, score_targets, set_loss, LossBreakdown, LossConfig, ScoreTarget, TargetRule};
pub use mosaic::{compose, ground_truth, sample_mosaic, MosaicSample};
pub use trainer::{clip_grad_norm, probe_iou_max, train, EpochLog, TrainState, TrainingData};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("assignment: {0}")]
    Assignment(String),
    #[error("sample must be pre-filtered")]
    NoHighQuality,
    #[error("non-finite loss at epoch {epoch}, step {step}, slot {slot} (sample {sample}): {breakdown}")]
    NonFinite {
        epoch: usize,
        step: usize,
        slot: usize,
        sample: String,
        breakdown: String,
    },
    #[error("invalid training config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("mosaic: {0}")]
    Mosaic(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Box(#[from] BoxError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub mosaic_enabled: bool,
    pub query_mode: QueryMode,
    /// Probability of mirroring each drawn scene.
    pub flip_prob: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            lr_max: 1e-4,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            loss: LossConfig::default(),
            seed: 0,
            mosaic_enabled: true,
            query_mode: QueryMode::Both,
            flip_prob: 0.5,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, so callers can report them together.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            errs.push(format!("need lr_max >= lr_min > 0, got {} and {}", self.lr_max, self.lr_min));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errs.push(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        let l = &self.loss;
        for (name, v) in [
            ("lambda_l1", l.lambda_l1),
            ("lambda_giou", l.lambda_giou),
            ("lambda_score", l.lambda_score),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if !(l.box_beta > 0.0 && l.score_beta > 0.0) {
            errs.push("smooth-L1 betas must be positive".to_string());
        }
        if !(l.smoothing_iou_threshold > 0.0 && l.smoothing_iou_threshold <= 1.0) {
            errs.push(format!("smoothing_iou_threshold must lie in (0, 1], got {}", l.smoothing_iou_threshold));
        }
        if !(1.0..=5.0).contains(&l.hq_score_threshold) {
            errs.push(format!("hq_score_threshold must lie in [1, 5], got {}", l.hq_score_threshold));
        }
        if !(l.background_weight > 0.0 && l.background_weight <= 1.0) {
            errs.push(format!("background_weight must lie in (0, 1], got {}", l.background_weight));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            errs.push(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            errs.push(format!("grad_clip must be nonnegative, got {}", self.grad_clip));
        }
        if self.query_mode == QueryMode::Image {
            errs.push("query_mode image is inference-only; training needs a text mode".to_string());
        }
        errs
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::Config(vec!["cosine schedule needs at least one step".into()]));
    }
    if step > total_steps {
        return Err(TrainError::Config(vec![format!("step {step} beyond schedule of {total_steps}")]));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}
