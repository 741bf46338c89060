use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{latent_feedback, tok, ElementKind, KvCache, LossMask, Model, Net, SequenceElement, SequenceLayout};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    /// Cap on generated elements, text and latent together.
    pub max_new: usize,
    pub mode: DecodeMode,
    pub seed: u64,
}

impl DecodeOptions {
    pub fn greedy(max_new: usize) -> Self {
        DecodeOptions { max_new, mode: DecodeMode::Greedy, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecodeStep {
    /// A selected token with its log-probability under the decoding
    /// distribution (temperature-scaled when sampling).
    Text { id: usize, logprob: f64 },
    /// `<vend>` inserted after a latent span; never sampled.
    ForcedEnd,
    Latent { slot: usize },
}

#[derive(Clone, Debug)]
pub struct DecodeTrace {
    /// Prompt followed by every generated element.
    pub layout: SequenceLayout,
    pub prompt_len: usize,
    pub steps: Vec<DecodeStep>,
    /// Vector fed to each latent slot, in generation order.
    pub latent_inputs: Vec<Vec<f64>>,
    /// Post-norm hidden state at the position before each latent slot.
    pub latent_sources: Vec<Vec<f64>>,
    /// Vocabulary projections evaluated while inside a latent span.
    pub latent_vocab_projections: usize,
    pub hit_eos: bool,
    pub truncated: bool,
}

impl DecodeTrace {
    pub fn generated_ids(&self) -> Vec<usize> {
        self.layout.elements[self.prompt_len..].iter().filter_map(SequenceElement::token).collect()
    }

    /// Log-probabilities of the sampled text tokens, in order.
    pub fn text_logprobs(&self) -> Vec<f64> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                DecodeStep::Text { logprob, .. } => Some(*logprob),
                _ => None,
            })
            .collect()
    }
}

/// `log_softmax(logits / temperature)` in f64.
pub fn scaled_log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|&x| x - lse).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

struct Decoder<'t, S: Scalar> {
    net: Net<'t, S>,
    cache: KvCache<'t, S>,
    /// Inside a latent span: set from `<vstart>` until `<vend>` is fed.
    in_latent: bool,
    latent_projections: usize,
}

impl<'t, S: Scalar> Decoder<'t, S> {
    fn project(&mut self, hidden: Var<'t, S>) -> Result<Vec<f64>> {
        if self.in_latent {
            self.latent_projections += 1;
        }
        Ok(self.net.logits(hidden)?.to_vec().into_iter().map(S::f64).collect())
    }

    fn feed(&mut self, el: &SequenceElement, latent: Option<Var<'t, S>>) -> Result<Var<'t, S>> {
        let pos = self.cache.len();
        let latents: Vec<_> = latent.into_iter().collect();
        let x = self.net.embed_chunk(std::slice::from_ref(el), pos, &latents)?;
        self.net.forward_chunk(&mut self.cache, x)
    }
}

/// Autoregressive decoding with latent spans. After `<vstart>` the next
/// `k_latent` steps feed the model's own post-norm hidden state back as the
/// input, without consulting the vocabulary head, then `<vend>` is inserted.
pub fn decode<S: Scalar>(model: &Model<S>, prompt: &SequenceLayout, opts: &DecodeOptions) -> Result<DecodeTrace> {
    let cfg = &model.config;
    match prompt.elements.last().map(|e| &e.kind) {
        Some(ElementKind::Text(_)) => {}
        _ => return Err(Error::Layout("prompt must end at a text position".into())),
    }
    if let DecodeMode::Sample { temperature } = opts.mode {
        if !(temperature > 0.0) {
            return Err(Error::config("temperature", format!("must be positive, got {temperature}")));
        }
    }
    if prompt.len() > cfg.max_seq {
        return Err(Error::TooLong { len: prompt.len(), max: cfg.max_seq });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let tape = Tape::new();
    let net = model.bind_frozen(&tape)?;
    let mut dec = Decoder { net, cache: KvCache::new(cfg.n_layers), in_latent: false, latent_projections: 0 };
    let x = dec.net.embed_chunk(&prompt.elements, 0, &[])?;
    let h = dec.net.forward_chunk(&mut dec.cache, x)?;
    let mut last = h.rows(prompt.len() - 1, 1)?;

    let mut trace = DecodeTrace {
        layout: prompt.clone(),
        prompt_len: prompt.len(),
        steps: Vec::new(),
        latent_inputs: Vec::new(),
        latent_sources: Vec::new(),
        latent_vocab_projections: 0,
        hit_eos: false,
        truncated: false,
    };
    let k = cfg.k_latent;
    let room = |trace: &DecodeTrace, need: usize| {
        trace.steps.len() + need <= opts.max_new && trace.layout.len() + need <= cfg.max_seq
    };
    loop {
        if !room(&trace, 1) {
            trace.truncated = true;
            break;
        }
        let logits = dec.project(last)?;
        let (id, logprob) = match opts.mode {
            DecodeMode::Greedy => {
                let id = argmax_lowest(&logits);
                (id, scaled_log_softmax(&logits, 1.0)[id])
            }
            DecodeMode::Sample { temperature } => {
                let lp = scaled_log_softmax(&logits, temperature);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut id = lp.len() - 1;
                for (i, &l) in lp.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        id = i;
                        break;
                    }
                }
                (id, lp[id])
            }
        };
        let el = SequenceElement::text(id, LossMask::None);
        last = dec.feed(&el, None)?;
        trace.layout.elements.push(el);
        trace.steps.push(DecodeStep::Text { id, logprob });
        if id == tok::EOS {
            trace.hit_eos = true;
            break;
        }
        if id != tok::VSTART {
            continue;
        }
        dec.in_latent = true;
        for slot in 0..k {
            if !room(&trace, 1) {
                trace.truncated = true;
                break;
            }
            trace.latent_sources.push(last.to_vec().into_iter().map(S::f64).collect());
            let input = latent_feedback(last);
            trace.latent_inputs.push(input.to_vec().into_iter().map(S::f64).collect());
            let el = SequenceElement { kind: ElementKind::Latent(slot), mask: LossMask::None };
            last = dec.feed(&el, Some(input))?;
            trace.layout.elements.push(el);
            trace.steps.push(DecodeStep::Latent { slot });
        }
        if trace.truncated {
            break;
        }
        if !room(&trace, 1) {
            trace.truncated = true;
            break;
        }
        let el = SequenceElement::text(tok::VEND, LossMask::None);
        last = dec.feed(&el, None)?;
        dec.in_latent = false;
        trace.layout.elements.push(el);
        trace.steps.push(DecodeStep::ForcedEnd);
    }
    trace.latent_vocab_projections = dec.latent_projections;
    Ok(trace)
}
