//! Two-stage supervised training. Stage 1 grounds latent slots on pooled
//! helper-image embeddings next to a weighted text loss; stage 2 trains the
//! text loss alone while latent slots are filled by the model's own hidden
//! states on the same tape.

mod loss;
mod trainer;

pub use loss::{
    build_stage1_layout, compress, helper_embedding, pooling_bins, sample_loss, stage1_loss, stage2_loss, stage2_loss_split,
    text_only_loss, LossReport, StageLoss,
};
pub use trainer::{
    schedule_lr, steps_per_epoch, train_stage, MetricsRow, StageOutputs, TrainOutcome, METRICS_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tok, LossMask, SequenceLayout, Tokenizer};
use crate::taskgen::TrajectorySample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    /// Latent slots per helper image; 0 trains plain text with no span.
    pub k_latent: usize,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub warmup: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Treat stage-1 latent targets as constants.
    pub stop_grad_targets: bool,
    /// Lets stage 2 start without a stage-1 checkpoint (ablations).
    pub allow_no_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            k_latent: 4,
            gamma: 0.1,
            lr: 1e-5,
            batch_size: 8,
            grad_accum: 2,
            warmup: 10,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            seed: 42,
            clip_norm: 1.0,
            stop_grad_targets: true,
            allow_no_init: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::config("stage", format!("must be 1 or 2, got {}", self.stage)));
        }
        if self.stage == 1 && self.k_latent == 0 {
            return Err(Error::config("k_latent", "stage 1 needs at least one latent slot"));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("gamma", format!("must be positive, got {}", self.gamma)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::config("batch_size", "batch_size and grad_accum must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", format!("must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", format!("must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }
}

/// Input images followed by the question. This is the decoding prompt.
pub fn prompt_layout(sample: &TrajectorySample) -> Result<SequenceLayout> {
    let tk = Tokenizer::standard();
    let mut layout = SequenceLayout::default();
    for img in &sample.input_images {
        layout.push_patches(img);
    }
    layout.push_text(&tk.encode(&sample.question_text)?, LossMask::None);
    let q = layout.len();
    layout.boundaries = [q; 4];
    Ok(layout)
}

/// Full training layout:
/// `[patches][question][o_pre][<vstart>][k latent][<vend>][o_post][<eos>]`.
/// Text after the question is a text target; latent slots carry
/// `latent_mask`. With `k = 0` the span is left out and `o_pre` runs straight
/// into `o_post`.
pub fn sample_layout(sample: &TrajectorySample, k: usize, latent_mask: LossMask) -> Result<SequenceLayout> {
    let tk = Tokenizer::standard();
    let mut layout = prompt_layout(sample)?;
    let q = layout.len();
    layout.push_text(&tk.encode(&sample.o_pre)?, LossMask::Text);
    let pre = layout.len();
    if k > 0 {
        layout.push_latent_span(k, LossMask::Text, latent_mask);
    }
    let span = layout.len();
    layout.push_text(&tk.encode(&sample.o_post)?, LossMask::Text);
    let post = layout.len();
    layout.push_text(&[tok::EOS], LossMask::Text);
    layout.boundaries = [q, pre, span, post];
    Ok(layout)
}
