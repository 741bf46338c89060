use crate::autodiff::{cosine_alignment_loss, cross_entropy, Var};
use crate::error::{Error, Result};
use crate::model::{LatentSource, LossMask, Net, PatchGrid, SequenceLayout};
use crate::scalar::Scalar;
use crate::taskgen::TrajectorySample;
use crate::train::{sample_layout, TrainConfig};

/// Per-sample loss values. `l_visual` is `None` when no latent term exists.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_visual: Option<f64>,
    pub l_text: f64,
    pub l_total: f64,
    /// Text-target positions in the loss.
    pub tokens_seen: usize,
}

/// A differentiable loss plus its report.
pub struct StageLoss<'t, S: Scalar> {
    pub total: Var<'t, S>,
    pub report: LossReport,
    pub layout: SequenceLayout,
    /// Inputs fed to the latent slots, in order.
    pub latent_inputs: Vec<Var<'t, S>>,
    /// Post-norm hidden states of the whole sequence.
    pub hidden: Var<'t, S>,
}

/// Half-open row ranges of the `k` pooling bins over `n` rows:
/// bin `j` covers `[floor(j n / k), floor((j + 1) n / k))`.
pub fn pooling_bins(n: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 || n < k {
        return Err(Error::Invalid(format!("cannot pool {n} rows into {k} bins")));
    }
    Ok((0..k).map(|j| (j * n / k, (j + 1) * n / k)).collect())
}

/// Average-pools the rows of `x [n x d]` into `k` rows.
pub fn compress<'t, S: Scalar>(x: Var<'t, S>, k: usize) -> Result<Var<'t, S>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::Invalid(format!("compress needs a matrix, got shape {shape:?}")));
    }
    let n = shape[0];
    let mut pool = vec![S::zero(); k * n];
    for (j, (lo, hi)) in pooling_bins(n, k)?.into_iter().enumerate() {
        let w = S::one() / S::of((hi - lo) as f64);
        pool[j * n + lo..j * n + hi].iter_mut().for_each(|p| *p = w);
    }
    let p = x.tape().constant(vec![k, n], pool)?;
    Ok(p.matmul(x)?)
}

/// Embedded helper patches `[rows*cols x d]`, row-major.
pub fn helper_embedding<'t, S: Scalar>(net: &Net<'t, S>, helper: &PatchGrid) -> Result<Var<'t, S>> {
    let n = helper.len();
    let rows: Vec<usize> = (0..n).map(|i| i / helper.cols).collect();
    let cols: Vec<usize> = (0..n).map(|i| i % helper.cols).collect();
    net.embed_patches(&helper.data, &rows, &cols)
}

/// Stage-1 layout plus latent targets `[k x d]`: the pooled embedding of the
/// helper image. Slot `j` is fed target `j` and the position before it is
/// trained to predict it.
pub fn build_stage1_layout<'t, S: Scalar>(
    net: &Net<'t, S>,
    sample: &TrajectorySample,
    cfg: &TrainConfig,
) -> Result<(SequenceLayout, Var<'t, S>)> {
    let helper = sample.helper.as_ref().ok_or_else(|| Error::Dataset(format!("sample {} has no helper image", sample.id)))?;
    let layout = sample_layout(sample, cfg.k_latent, LossMask::Latent)?;
    let targets = compress(helper_embedding(net, helper)?, cfg.k_latent)?;
    let targets = if cfg.stop_grad_targets {
        net.tape().constant(targets.shape(), targets.to_vec())?
    } else {
        targets
    };
    Ok((layout, targets))
}

fn text_ce<'t, S: Scalar>(net: &Net<'t, S>, hidden: Var<'t, S>, layout: &SequenceLayout) -> Result<(Var<'t, S>, usize)> {
    let (targets, mask) = layout.text_targets();
    let n = mask.iter().filter(|&&m| m).count();
    Ok((cross_entropy(net.logits(hidden)?, &targets, &mask)?, n))
}

fn finite_or_halt(sample: &TrajectorySample, report: &LossReport) -> Result<()> {
    let vis = report.l_visual.unwrap_or(0.0);
    if report.l_total.is_finite() && report.l_text.is_finite() && vis.is_finite() {
        return Ok(());
    }
    Err(Error::Halted(format!(
        "non-finite loss on sample {}: l_visual={:?} l_text={} l_total={}",
        sample.id, report.l_visual, report.l_text, report.l_total
    )))
}

/// Cosine alignment between each latent prediction row and its target, plus
/// `gamma` times the text cross-entropy.
pub fn stage1_loss<'t, S: Scalar>(
    net: &Net<'t, S>,
    hidden: Var<'t, S>,
    layout: &SequenceLayout,
    targets: Var<'t, S>,
    gamma: f64,
) -> Result<(Var<'t, S>, LossReport)> {
    let rows = layout.latent_prediction_rows();
    if rows.len() != targets.shape()[0] {
        return Err(Error::Layout(format!("{} latent-target positions for {} targets", rows.len(), targets.shape()[0])));
    }
    let l_visual = cosine_alignment_loss(hidden.gather(rows)?, targets)?;
    let (l_text, tokens_seen) = text_ce(net, hidden, layout)?;
    let total = l_text.scale(gamma)?.add(l_visual)?;
    let report = LossReport {
        l_visual: Some(l_visual.item().f64()),
        l_text: l_text.item().f64(),
        l_total: total.item().f64(),
        tokens_seen,
    };
    Ok((total, report))
}

fn stage1<'t, S: Scalar>(net: &Net<'t, S>, sample: &TrajectorySample, cfg: &TrainConfig) -> Result<StageLoss<'t, S>> {
    let (layout, targets) = build_stage1_layout(net, sample, cfg)?;
    let inputs: Vec<Var<'t, S>> = (0..cfg.k_latent).map(|j| targets.rows(j, 1)).collect::<Result<_, _>>()?;
    let out = net.run(&layout, LatentSource::Provided(&inputs))?;
    let (total, report) = stage1_loss(net, out.hidden, &layout, targets, cfg.gamma)?;
    finite_or_halt(sample, &report)?;
    Ok(StageLoss { total, report, layout, latent_inputs: out.latent_inputs, hidden: out.hidden })
}

/// Text cross-entropy with each latent slot fed the hidden state before it.
/// Nothing scores the latents directly; gradients reach the parameters
/// through them.
pub fn stage2_loss<'t, S: Scalar>(net: &Net<'t, S>, sample: &TrajectorySample, cfg: &TrainConfig) -> Result<StageLoss<'t, S>> {
    let layout = sample_layout(sample, cfg.k_latent, LossMask::None)?;
    let out = net.run(&layout, LatentSource::SelfGenerated)?;
    let (total, tokens_seen) = text_ce(net, out.hidden, &layout)?;
    let v = total.item().f64();
    let report = LossReport { l_visual: None, l_text: v, l_total: v, tokens_seen };
    finite_or_halt(sample, &report)?;
    Ok(StageLoss { total, report, layout, latent_inputs: out.latent_inputs, hidden: out.hidden })
}

/// Stage-2 loss with the latent inputs produced by `latent_net` and
/// everything else by `net`. With both bound to the same values this equals
/// [`stage2_loss`], and the gradient with respect to `latent_net` is exactly
/// the part that flows through the self-generated latents.
pub fn stage2_loss_split<'t, S: Scalar>(
    net: &Net<'t, S>,
    latent_net: &Net<'t, S>,
    sample: &TrajectorySample,
    cfg: &TrainConfig,
) -> Result<Var<'t, S>> {
    let layout = sample_layout(sample, cfg.k_latent, LossMask::None)?;
    let latents = latent_net.run(&layout, LatentSource::SelfGenerated)?.latent_inputs;
    let out = net.run(&layout, LatentSource::Provided(&latents))?;
    Ok(text_ce(net, out.hidden, &layout)?.0)
}

/// Plain next-token loss over the thoughts and answer, with no latent span.
pub fn text_only_loss<'t, S: Scalar>(net: &Net<'t, S>, sample: &TrajectorySample) -> Result<StageLoss<'t, S>> {
    let layout = sample_layout(sample, 0, LossMask::None)?;
    let out = net.run(&layout, LatentSource::Provided(&[]))?;
    let (total, tokens_seen) = text_ce(net, out.hidden, &layout)?;
    let v = total.item().f64();
    let report = LossReport { l_visual: None, l_text: v, l_total: v, tokens_seen };
    finite_or_halt(sample, &report)?;
    Ok(StageLoss { total, report, layout, latent_inputs: Vec::new(), hidden: out.hidden })
}

/// The loss `cfg` asks for: text only when `k_latent = 0`, otherwise the
/// stage's loss.
pub fn sample_loss<'t, S: Scalar>(net: &Net<'t, S>, sample: &TrajectorySample, cfg: &TrainConfig) -> Result<StageLoss<'t, S>> {
    match (cfg.k_latent, cfg.stage) {
        (0, _) => text_only_loss(net, sample),
        (_, 1) => stage1(net, sample, cfg),
        _ => stage2_loss(net, sample, cfg),
    }
}
