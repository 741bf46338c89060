use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{accumulate, adam_step, clip_grad_norm, cosine_lr, scale_grads, AdamConfig, AdamState, ParamGrads, Tape};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, LossMask, Model};
use crate::runlog::RunLog;
use crate::scalar::Scalar;
use crate::taskgen::TrajectorySample;
use crate::train::{sample_layout, sample_loss, LossReport, TrainConfig};

pub const METRICS_HEADER: &str = "step,epoch,stage,l_visual,l_text,l_total,lr,grad_norm,wall_ms";

/// One optimizer step. Losses are means over the step's samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub stage: u8,
    pub l_visual: Option<f64>,
    pub l_text: f64,
    pub l_total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: u128,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let vis = self.l_visual.map_or_else(|| "NA".to_string(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.stage, vis, self.l_text, self.l_total, self.lr, self.grad_norm, self.wall_ms
        )
    }
}

/// Where a stage writes. Either part may be absent (tests run in memory).
#[derive(Clone, Debug, Default)]
pub struct StageOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// File stem for checkpoints: `{tag}_epoch{e}.bin` and `{tag}.bin`.
    pub tag: String,
}

pub struct TrainOutcome<S: Scalar> {
    pub model: Model<S>,
    pub adam: AdamState<S>,
    pub metrics: Vec<MetricsRow>,
    pub skipped: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl<S: Scalar> TrainOutcome<S> {
    /// Mean `(l_visual, l_text)` of each epoch's steps, weighting steps
    /// equally.
    pub fn epoch_means(&self) -> Vec<(Option<f64>, f64)> {
        let epochs = self.metrics.iter().map(|r| r.epoch).max().unwrap_or(0);
        (1..=epochs)
            .map(|e| {
                let rows: Vec<_> = self.metrics.iter().filter(|r| r.epoch == e).collect();
                let n = rows.len() as f64;
                let vis = rows.iter().map(|r| r.l_visual).sum::<Option<f64>>().map(|v| v / n);
                (vis, rows.iter().map(|r| r.l_text).sum::<f64>() / n)
            })
            .collect()
    }
}

pub fn steps_per_epoch(n_samples: usize, effective_batch: usize) -> usize {
    n_samples.div_ceil(effective_batch)
}

/// Learning rate at 1-based optimizer step `step`: linear warmup reaching
/// `base` at `step == warmup`, then half-cosine decay that would reach zero
/// one step after `total`.
pub fn schedule_lr(step: usize, warmup: usize, total: usize, base: f64) -> f64 {
    cosine_lr(step, warmup, total + 1, base)
}

fn sample_grad<S: Scalar>(model: &Model<S>, sample: &TrajectorySample, cfg: &TrainConfig) -> Result<(ParamGrads<S>, LossReport)> {
    let tape = Tape::new();
    let net = model.bind(&tape)?;
    let loss = sample_loss(&net, sample, cfg)?;
    let grads = net.params.grads(&tape.backward(loss.total)?);
    Ok((grads, loss.report))
}

fn mean_report(reports: &[LossReport]) -> (Option<f64>, f64, f64) {
    let n = reports.len() as f64;
    let vis = reports.iter().map(|r| r.l_visual).sum::<Option<f64>>().map(|v| v / n);
    let text = reports.iter().map(|r| r.l_text).sum::<f64>() / n;
    let total = reports.iter().map(|r| r.l_total).sum::<f64>() / n;
    (vis, text, total)
}

/// Runs one supervised stage over `samples`. Samples whose layout exceeds
/// `max_seq` (or that lack a helper image in stage 1) are skipped and
/// logged. Each optimizer step averages per-sample gradients over
/// `batch_size * grad_accum` samples, summed in a fixed order so the result
/// does not depend on the thread count.
pub fn train_stage<S: Scalar>(
    mut model: Model<S>,
    adam: Option<AdamState<S>>,
    samples: &[TrajectorySample],
    cfg: &TrainConfig,
    out: &StageOutputs,
    log: &mut RunLog,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if cfg.k_latent != 0 && cfg.k_latent != model.config.k_latent {
        return Err(Error::config(
            "k_latent",
            format!("training uses {} latent slots but the model decodes {}", cfg.k_latent, model.config.k_latent),
        ));
    }
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut kept = Vec::with_capacity(samples.len());
    for s in samples {
        let len = sample_layout(s, cfg.k_latent, LossMask::None)?.len();
        if len > model.config.max_seq {
            log.log(format!("skip {}: layout of {len} exceeds max_seq {}", s.id, model.config.max_seq));
        } else if cfg.stage == 1 && cfg.k_latent > 0 && s.helper.is_none() {
            log.log(format!("skip {}: no helper image", s.id));
        } else {
            kept.push(s);
        }
    }
    let skipped = samples.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Dataset("every training sample was skipped".into()));
    }

    let mut adam = adam.unwrap_or_else(|| AdamState::new(&model.params));
    let eff = cfg.effective_batch();
    let per_epoch = steps_per_epoch(kept.len(), eff);
    let total = per_epoch * cfg.epochs;
    log.log(format!(
        "stage {} ({}): {} samples, {skipped} skipped, {per_epoch} steps/epoch, {total} steps",
        cfg.stage,
        if cfg.k_latent == 0 { "text only".to_string() } else { format!("k={}", cfg.k_latent) },
        kept.len()
    ));

    let mut metrics_file = match &out.metrics_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((f, p.clone()))
        }
        None => None,
    };
    if let Some(dir) = &out.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..kept.len()).collect();
    let mut metrics = Vec::with_capacity(total);
    let mut checkpoints = Vec::new();
    let start = Instant::now();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(eff) {
            step += 1;
            let mut acc = model.params.zero_grads();
            let mut reports = Vec::with_capacity(chunk.len());
            for micro in chunk.chunks(cfg.batch_size) {
                let results: Vec<_> = micro.par_iter().map(|&i| sample_grad(&model, kept[i], cfg)).collect();
                for r in results {
                    let (g, rep) = r.inspect_err(|e| log.log(format!("halt at step {step}, epoch {epoch}: {e}")))?;
                    accumulate(&mut acc, &g);
                    reports.push(rep);
                }
            }
            scale_grads(&mut acc, S::one() / S::of(chunk.len() as f64));
            let grad_norm = clip_grad_norm(&mut acc, cfg.clip_norm);
            if !grad_norm.is_finite() {
                let msg = format!("non-finite gradient norm at step {step}, epoch {epoch}");
                log.log(msg.clone());
                return Err(Error::Halted(msg));
            }
            let lr = schedule_lr(step, cfg.warmup, total, cfg.lr);
            let acfg = AdamConfig { lr, beta1: cfg.beta1, beta2: cfg.beta2, weight_decay: cfg.weight_decay, eps: 1e-8 };
            adam_step(&mut model.params, &acc, &mut adam, &acfg)?;

            let (l_visual, l_text, l_total) = mean_report(&reports);
            let row = MetricsRow {
                step,
                epoch,
                stage: cfg.stage,
                l_visual,
                l_text,
                l_total,
                lr,
                grad_norm,
                wall_ms: start.elapsed().as_millis(),
            };
            if let Some((f, p)) = metrics_file.as_mut() {
                writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(&*p, e))?;
            }
            metrics.push(row);
        }
        let last = metrics.last().expect("at least one step per epoch");
        log.log(format!(
            "stage {} epoch {epoch}/{}: l_visual {} l_text {:.4} l_total {:.4}",
            cfg.stage,
            cfg.epochs,
            last.l_visual.map_or("NA".into(), |v| format!("{v:.4}")),
            last.l_text,
            last.l_total
        ));
        if let Some(dir) = &out.checkpoint_dir {
            let meta = checkpoint_meta(cfg, epoch, step, skipped);
            let path = dir.join(format!("{}_epoch{epoch:02}.bin", out.tag));
            Checkpoint::from_model(&model, Some(&adam), meta).save(&path)?;
            checkpoints.push(path);
        }
    }
    if let Some(dir) = &out.checkpoint_dir {
        let path = dir.join(format!("{}.bin", out.tag));
        Checkpoint::from_model(&model, Some(&adam), checkpoint_meta(cfg, cfg.epochs, step, skipped)).save(&path)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome { model, adam, metrics, skipped, checkpoints })
}

fn checkpoint_meta(cfg: &TrainConfig, epoch: usize, step: usize, skipped: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("stage".to_string(), cfg.stage.to_string()),
        ("epoch".to_string(), epoch.to_string()),
        ("step".to_string(), step.to_string()),
        ("k_latent".to_string(), cfg.k_latent.to_string()),
        ("gamma".to_string(), cfg.gamma.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("skipped".to_string(), skipped.to_string()),
    ])
}
