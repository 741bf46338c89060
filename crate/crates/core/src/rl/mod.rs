//! Group-relative policy optimization. Responses are sampled in groups per
//! prompt, rewarded for a correct and well-formed answer, and the policy is
//! updated with a clipped surrogate on text-token probabilities plus an
//! exact KL penalty against a frozen reference. Latent steps carry no
//! likelihood term, but replaying them from the current policy lets
//! gradients flow through them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{accumulate, adam_step, clip_grad_norm, AdamConfig, AdamState, ParamGrads, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{answer_correct, extract_answer, response_text};
use crate::model::{decode, Checkpoint, DecodeMode, DecodeOptions, DecodeStep, DecodeTrace, LatentSource, Model, Net};
use crate::runlog::RunLog;
use crate::scalar::Scalar;
use crate::taskgen::{splitmix64, TrajectorySample};
use crate::train::prompt_layout;

pub const RL_METRICS_HEADER: &str = "epoch,batch,mean_reward,accuracy,format_rate,kl,clip_frac,excluded_tokens";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RLConfig {
    pub group_size: usize,
    pub lr: f64,
    pub batch_prompts: usize,
    /// Groups per gradient micro-batch.
    pub mini_batch: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub clip_ratio: f64,
    pub kl_coef: f64,
    pub entropy_coef: f64,
    pub sigma_f: f64,
    pub sigma_c: f64,
    pub temperature: f64,
    pub max_response: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Fraction of excluded tokens above which an update is skipped.
    pub max_excluded_frac: f64,
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            group_size: 5,
            lr: 1e-6,
            batch_prompts: 32,
            mini_batch: 8,
            grad_accum: 4,
            epochs: 15,
            clip_ratio: 0.2,
            kl_coef: 0.01,
            entropy_coef: 0.0,
            sigma_f: 0.1,
            sigma_c: 0.9,
            temperature: 1.0,
            max_response: 1024,
            seed: 42,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            clip_norm: 1.0,
            max_excluded_frac: 0.01,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("group_size", format!("must be at least 2, got {}", self.group_size)));
        }
        if !(self.sigma_f + self.sigma_c > 0.0) {
            return Err(Error::config("sigma_c", "sigma_f + sigma_c must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.batch_prompts == 0 || self.mini_batch == 0 || self.grad_accum == 0 || self.epochs == 0 {
            return Err(Error::config("batch_prompts", "batch sizes and epochs must be at least 1"));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(Error::config("clip_ratio", format!("must lie in (0, 1), got {}", self.clip_ratio)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", format!("must be positive, got {}", self.temperature)));
        }
        if self.kl_coef < 0.0 || self.entropy_coef < 0.0 {
            return Err(Error::config("kl_coef", "coefficients must be non-negative"));
        }
        Ok(())
    }

    /// Groups per optimizer step.
    pub fn groups_per_step(&self) -> usize {
        self.mini_batch * self.grad_accum
    }
}

#[derive(Clone, Debug)]
pub struct Response {
    pub trace: DecodeTrace,
    pub text: String,
    /// Behavior log-probabilities of the sampled text tokens.
    pub logprobs: Vec<f64>,
    pub correct: bool,
    pub formatted: bool,
    pub reward: f64,
    pub advantage: f64,
}

#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub responses: Vec<Response>,
}

/// One `<think>` ... `</think>` span followed by a complete `\boxed{...}`.
pub fn format_ok(text: &str) -> bool {
    let words: Vec<&str> = text.split_whitespace().collect();
    let opens: Vec<usize> = (0..words.len()).filter(|&i| words[i] == "<think>").collect();
    let closes: Vec<usize> = (0..words.len()).filter(|&i| words[i] == "</think>").collect();
    if opens.len() != 1 || closes.len() != 1 || opens[0] > closes[0] {
        return false;
    }
    extract_answer(&words[closes[0] + 1..].join(" ")).is_some()
}

/// `sigma_c * r_acc + sigma_f * r_format`.
pub fn combine_reward(correct: bool, formatted: bool, sigma_c: f64, sigma_f: f64) -> f64 {
    sigma_c * f64::from(u8::from(correct)) + sigma_f * f64::from(u8::from(formatted))
}

/// Reward of a response against a gold answer string (trimmed,
/// case-insensitive).
pub fn reward(response: &str, gold: &str, cfg: &RLConfig) -> f64 {
    let correct = extract_answer(response).is_some_and(|a| a.trim().eq_ignore_ascii_case(gold.trim()));
    combine_reward(correct, format_ok(response), cfg.sigma_c, cfg.sigma_f)
}

/// `(r - mean) / (std + 1e-6)` with the population std; all zeros when the
/// std is below 1e-8.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / (std + 1e-6)).collect()
}

/// `G` sampled decodes of one prompt with seeds `seed * G + g`. `None` when
/// every response was truncated.
pub fn rollout<S: Scalar>(
    model: &Model<S>,
    sample: &TrajectorySample,
    group_size: usize,
    temperature: f64,
    seed: u64,
    max_new: usize,
) -> Result<Option<RolloutGroup>> {
    let prompt = prompt_layout(sample)?;
    let mut responses = Vec::with_capacity(group_size);
    for g in 0..group_size as u64 {
        let opts = DecodeOptions { max_new, mode: DecodeMode::Sample { temperature }, seed: seed.wrapping_mul(group_size as u64).wrapping_add(g) };
        let trace = decode(model, &prompt, &opts)?;
        let text = response_text(&trace);
        responses.push(Response {
            logprobs: trace.text_logprobs(),
            text,
            trace,
            correct: false,
            formatted: false,
            reward: 0.0,
            advantage: 0.0,
        });
    }
    if responses.iter().all(|r| r.trace.truncated) {
        return Ok(None);
    }
    Ok(Some(RolloutGroup { prompt_id: sample.id.clone(), responses }))
}

/// Fills rewards and advantages. A truncated response scores zero.
pub fn score_group(group: &mut RolloutGroup, sample: &TrajectorySample, cfg: &RLConfig) {
    for r in &mut group.responses {
        r.correct = !r.trace.truncated && extract_answer(&r.text).is_some_and(|a| answer_correct(sample, &a));
        r.formatted = !r.trace.truncated && format_ok(&r.text);
        r.reward = combine_reward(r.correct, r.formatted, cfg.sigma_c, cfg.sigma_f);
    }
    let rewards: Vec<f64> = group.responses.iter().map(|r| r.reward).collect();
    for (r, a) in group.responses.iter_mut().zip(group_advantages(&rewards)) {
        r.advantage = a;
    }
}

/// Sampled text tokens of a trace: `(row predicting it, token id, behavior
/// log-prob)`. Forced `<vend>` tokens and latent steps are left out.
pub fn sampled_text_terms(trace: &DecodeTrace) -> Vec<(usize, usize, f64)> {
    trace
        .steps
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            DecodeStep::Text { id, logprob } => Some((trace.prompt_len + i - 1, *id, *logprob)),
            _ => None,
        })
        .collect()
}

/// Temperature-scaled log-softmax rows `[n x V]` at `rows`, replaying the
/// trace with latents re-derived by `net`.
fn replay_log_probs<'t, S: Scalar>(net: &Net<'t, S>, trace: &DecodeTrace, rows: &[usize], temperature: f64) -> Result<Var<'t, S>> {
    let out = net.run(&trace.layout, LatentSource::SelfGenerated)?;
    Ok(net.logits(out.hidden.gather(rows.to_vec())?)?.scale(1.0 / temperature)?.log_softmax()?)
}

/// Log-probabilities of the trace's sampled text tokens under `model`.
pub fn replay_logprobs<S: Scalar>(model: &Model<S>, trace: &DecodeTrace, temperature: f64) -> Result<Vec<f64>> {
    let terms = sampled_text_terms(trace);
    if terms.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let net = model.bind_frozen(&tape)?;
    let rows: Vec<usize> = terms.iter().map(|t| t.0).collect();
    let lp = replay_log_probs(&net, trace, &rows, temperature)?;
    Ok(lp.pick(terms.iter().map(|t| t.1).collect())?.to_vec().into_iter().map(S::f64).collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    /// Surrogate loss plus penalties, as minimized.
    pub loss: f64,
    /// Mean per-token KL to the reference.
    pub kl: f64,
    pub clip_frac: f64,
    pub tokens: usize,
    pub excluded_tokens: usize,
    /// Likelihood, ratio or KL terms evaluated at latent positions.
    pub latent_terms: usize,
    pub aborted: bool,
}

struct ResponseGrad<S> {
    grads: ParamGrads<S>,
    loss: f64,
    kl_sum: f64,
    clipped: usize,
    tokens: usize,
    excluded: usize,
    latent_terms: usize,
}

fn response_grad<S: Scalar>(
    model: &Model<S>,
    reference: &Model<S>,
    resp: &Response,
    cfg: &RLConfig,
    norm: f64,
) -> Result<ResponseGrad<S>> {
    let terms = sampled_text_terms(&resp.trace);
    let n = terms.len();
    let latent_terms = terms.iter().filter(|t| resp.trace.layout.elements[t.0 + 1].is_latent()).count();
    if n == 0 {
        return Ok(ResponseGrad { grads: model.params.zero_grads(), loss: 0.0, kl_sum: 0.0, clipped: 0, tokens: 0, excluded: 0, latent_terms });
    }
    let rows: Vec<usize> = terms.iter().map(|t| t.0).collect();
    let ids: Vec<usize> = terms.iter().map(|t| t.1).collect();
    let v = model.config.vocab_size;

    let ref_lp: Vec<S> = {
        let tape = Tape::new();
        let net = reference.bind_frozen(&tape)?;
        replay_log_probs(&net, &resp.trace, &rows, cfg.temperature)?.to_vec()
    };

    let tape = Tape::new();
    let net = model.bind(&tape)?;
    let lp = replay_log_probs(&net, &resp.trace, &rows, cfg.temperature)?;
    let lp_tok = lp.pick(ids)?;
    let new_vals: Vec<f64> = lp_tok.to_vec().into_iter().map(S::f64).collect();

    let a = resp.advantage;
    let (lo, hi) = (1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
    let mut old = Vec::with_capacity(n);
    let mut coef = Vec::with_capacity(n);
    let mut row_mask = Vec::with_capacity(n * v);
    let (mut clipped_value, mut clipped, mut excluded) = (0.0, 0, 0);
    for (i, t) in terms.iter().enumerate() {
        let rho = (new_vals[i] - t.2).exp();
        if !rho.is_finite() || !new_vals[i].is_finite() {
            // Excluded: ratio pinned at one with zero weight.
            excluded += 1;
            old.push(S::of(new_vals[i]));
            coef.push(S::zero());
            row_mask.extend(std::iter::repeat_n(S::zero(), v));
            continue;
        }
        old.push(S::of(t.2));
        row_mask.extend(std::iter::repeat_n(S::one(), v));
        let clip_active = (a >= 0.0 && rho > hi) || (a < 0.0 && rho < lo);
        if clip_active {
            clipped += 1;
            clipped_value += rho.clamp(lo, hi) * a;
            coef.push(S::zero());
        } else {
            coef.push(S::of(a));
        }
    }
    let old = tape.constant(vec![n], old)?;
    let coef = tape.constant(vec![n], coef)?;
    let ratio = lp_tok.sub(old)?.exp()?;
    let surrogate = ratio.mul(coef)?.sum()?;

    let mask = tape.constant(vec![n, v], row_mask)?;
    let p = lp.exp()?;
    let ref_c = tape.constant(vec![n, v], ref_lp)?;
    let kl = p.mul(lp.sub(ref_c)?)?.mul(mask)?.sum()?;
    let mut loss = kl.scale(cfg.kl_coef)?.sub(surrogate)?;
    if cfg.entropy_coef > 0.0 {
        let neg_entropy = p.mul(lp)?.mul(mask)?.sum()?;
        loss = loss.add(neg_entropy.scale(cfg.entropy_coef)?)?;
    }
    let loss = loss.scale(1.0 / norm)?;
    let loss_value = loss.item().f64() - clipped_value / norm;
    let grads = net.params.grads(&tape.backward(loss)?);
    Ok(ResponseGrad { grads, loss: loss_value, kl_sum: kl.item().f64(), clipped, tokens: n, excluded, latent_terms })
}

/// Gradient of the GRPO objective over `groups`, normalized by the number of
/// sampled text tokens across all of them.
pub fn grpo_gradients<S: Scalar>(
    model: &Model<S>,
    reference: &Model<S>,
    groups: &[RolloutGroup],
    cfg: &RLConfig,
) -> Result<(ParamGrads<S>, UpdateStats)> {
    let responses: Vec<&Response> = groups.iter().flat_map(|g| &g.responses).collect();
    let total_tokens: usize = responses.iter().map(|r| sampled_text_terms(&r.trace).len()).sum();
    let norm = total_tokens.max(1) as f64;
    let mut acc = model.params.zero_grads();
    let mut stats = UpdateStats::default();
    let mut kl_sum = 0.0;
    let mut clipped = 0;
    for micro in responses.chunks(cfg.mini_batch * cfg.group_size) {
        let parts: Vec<_> = micro.par_iter().map(|r| response_grad(model, reference, r, cfg, norm)).collect();
        for part in parts {
            let part = part?;
            accumulate(&mut acc, &part.grads);
            stats.loss += part.loss;
            stats.tokens += part.tokens;
            stats.excluded_tokens += part.excluded;
            stats.latent_terms += part.latent_terms;
            kl_sum += part.kl_sum;
            clipped += part.clipped;
        }
    }
    let counted = (stats.tokens - stats.excluded_tokens).max(1) as f64;
    stats.kl = kl_sum / counted;
    stats.clip_frac = clipped as f64 / counted;
    Ok((acc, stats))
}

/// One optimizer step on `groups`. Skipped (and flagged) when more than
/// `max_excluded_frac` of the tokens had a non-finite ratio.
pub fn grpo_update<S: Scalar>(
    model: &mut Model<S>,
    reference: &Model<S>,
    groups: &[RolloutGroup],
    adam: &mut AdamState<S>,
    cfg: &RLConfig,
) -> Result<UpdateStats> {
    let (mut grads, mut stats) = grpo_gradients(model, reference, groups, cfg)?;
    if stats.tokens > 0 && stats.excluded_tokens as f64 > cfg.max_excluded_frac * stats.tokens as f64 {
        stats.aborted = true;
        return Ok(stats);
    }
    let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    if !norm.is_finite() {
        return Err(Error::Halted("non-finite gradient norm in policy update".into()));
    }
    let acfg = AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, weight_decay: cfg.weight_decay, eps: 1e-8 };
    adam_step(&mut model.params, &grads, adam, &acfg)?;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlMetricsRow {
    pub epoch: usize,
    pub batch: usize,
    pub mean_reward: f64,
    pub accuracy: f64,
    pub format_rate: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub excluded_tokens: usize,
}

impl RlMetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.batch, self.mean_reward, self.accuracy, self.format_rate, self.kl, self.clip_frac, self.excluded_tokens
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct RlOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub tag: String,
}

pub struct RlOutcome<S: Scalar> {
    pub model: Model<S>,
    pub adam: AdamState<S>,
    pub metrics: Vec<RlMetricsRow>,
    /// Mean reward over every scored response of each epoch.
    pub epoch_rewards: Vec<f64>,
    pub latent_terms: usize,
    pub dropped_groups: usize,
    pub checkpoints: Vec<PathBuf>,
}

fn prompt_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    splitmix64(splitmix64(seed ^ epoch as u64) ^ index as u64)
}

/// GRPO over `prompts` for `cfg.epochs`, against a frozen copy of the
/// starting model.
pub fn train_rl<S: Scalar>(
    model: Model<S>,
    prompts: &[TrajectorySample],
    cfg: &RLConfig,
    out: &RlOutputs,
    log: &mut RunLog,
) -> Result<RlOutcome<S>> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Dataset("rl prompt set is empty".into()));
    }
    let reference = model.clone();
    let mut model = model;
    let mut adam = AdamState::new(&model.params);
    let mut metrics_file = match &out.metrics_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{RL_METRICS_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((f, p.clone()))
        }
        None => None,
    };
    if let Some(dir) = &out.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let max_new = cfg.max_response.min(model.config.max_seq);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut outcome_metrics = Vec::new();
    let mut epoch_rewards = Vec::new();
    let (mut latent_terms, mut dropped) = (0, 0);
    let mut checkpoints = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut reward_sum, mut reward_n, mut correct_n) = (0.0, 0usize, 0usize);
        for (b, batch) in order.chunks(cfg.batch_prompts).enumerate() {
            let cur = &model;
            let groups: Vec<Option<RolloutGroup>> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = rollout(cur, &prompts[i], cfg.group_size, cfg.temperature, prompt_seed(cfg.seed, epoch, i), max_new)?;
                    if let Some(g) = g.as_mut() {
                        score_group(g, &prompts[i], cfg);
                    }
                    Ok(g)
                })
                .collect::<Result<_>>()?;
            let mut kept = Vec::with_capacity(groups.len());
            for (g, &i) in groups.into_iter().zip(batch) {
                match g {
                    Some(g) => kept.push(g),
                    None => {
                        dropped += 1;
                        log.log(format!("rl epoch {epoch} batch {}: dropped group for {}, every response truncated", b + 1, prompts[i].id));
                    }
                }
            }
            let responses: Vec<&Response> = kept.iter().flat_map(|g| &g.responses).collect();
            let nr = responses.len().max(1) as f64;
            let mean_reward = responses.iter().map(|r| r.reward).sum::<f64>() / nr;
            let accuracy = responses.iter().filter(|r| r.correct).count() as f64 / nr;
            let format_rate = responses.iter().filter(|r| r.formatted).count() as f64 / nr;
            reward_sum += responses.iter().map(|r| r.reward).sum::<f64>();
            reward_n += responses.len();
            correct_n += responses.iter().filter(|r| r.correct).count();

            let (mut kl, mut clip, mut excluded, mut steps) = (0.0, 0.0, 0, 0u32);
            for step_groups in kept.chunks(cfg.groups_per_step()) {
                let stats = grpo_update(&mut model, &reference, step_groups, &mut adam, cfg)?;
                if stats.aborted {
                    log.log(format!(
                        "rl epoch {epoch} batch {}: update skipped, {} of {} tokens excluded",
                        b + 1,
                        stats.excluded_tokens,
                        stats.tokens
                    ));
                }
                latent_terms += stats.latent_terms;
                kl += stats.kl;
                clip += stats.clip_frac;
                excluded += stats.excluded_tokens;
                steps += 1;
            }
            let steps_f = f64::from(steps.max(1));
            let row = RlMetricsRow {
                epoch,
                batch: b + 1,
                mean_reward,
                accuracy,
                format_rate,
                kl: kl / steps_f,
                clip_frac: clip / steps_f,
                excluded_tokens: excluded,
            };
            if let Some((f, p)) = metrics_file.as_mut() {
                writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(&*p, e))?;
            }
            outcome_metrics.push(row);
        }
        let mean = reward_sum / reward_n.max(1) as f64;
        epoch_rewards.push(mean);
        log.log(format!("rl epoch {epoch}/{}: mean reward {mean:.4}, accuracy {:.4}", cfg.epochs, correct_n as f64 / reward_n.max(1) as f64));
        if correct_n == 0 {
            log.log(format!("warning: rl epoch {epoch} had zero accuracy (reward collapse)"));
        }
        if let Some(dir) = &out.checkpoint_dir {
            let path = dir.join(format!("{}_epoch{epoch:02}.bin", out.tag));
            Checkpoint::from_model(&model, Some(&adam), rl_meta(cfg, epoch)).save(&path)?;
            checkpoints.push(path);
        }
    }
    if let Some(dir) = &out.checkpoint_dir {
        let path = dir.join(format!("{}.bin", out.tag));
        Checkpoint::from_model(&model, Some(&adam), rl_meta(cfg, cfg.epochs)).save(&path)?;
        checkpoints.push(path);
    }
    Ok(RlOutcome { model, adam, metrics: outcome_metrics, epoch_rewards, latent_terms, dropped_groups: dropped, checkpoints })
}

fn rl_meta(cfg: &RLConfig, epoch: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("stage".to_string(), "rl".to_string()),
        ("epoch".to_string(), epoch.to_string()),
        ("group_size".to_string(), cfg.group_size.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ])
}
