use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ElementKind, ModelConfig, SequenceElement, SequenceLayout};
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerIndex {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Positions of each named tensor inside the model's [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamIndex {
    pub tok_emb: usize,
    pub patch_proj: usize,
    pub pos_emb: usize,
    pub row_emb: usize,
    pub col_emb: usize,
    pub layers: Vec<LayerIndex>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head: usize,
}

/// Expected `(name, shape)` of every parameter, in store order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("patch_proj".to_string(), vec![cfg.patch_feature_dim, d]),
        ("pos_emb".to_string(), vec![cfg.max_seq, d]),
        ("row_emb".to_string(), vec![cfg.max_grid, d]),
        ("col_emb".to_string(), vec![cfg.max_grid, d]),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
            (p("mlp.w1"), vec![d, f]),
            (p("mlp.b1"), vec![f]),
            (p("mlp.w2"), vec![f, d]),
            (p("mlp.b2"), vec![d]),
        ]);
    }
    out.push(("ln_f.gain".to_string(), vec![d]));
    out.push(("ln_f.bias".to_string(), vec![d]));
    out.push(("head".to_string(), vec![d, v]));
    out
}

fn build_index<S: Scalar>(cfg: &ModelConfig, params: &ParamStore<S>) -> Result<ParamIndex> {
    let expected = param_layout(cfg);
    if params.len() != expected.len() {
        return Err(Error::Checkpoint(format!("expected {} parameter tensors, found {}", expected.len(), params.len())));
    }
    for (i, (name, shape)) in expected.iter().enumerate() {
        if params.name(i) != name || params.at(i).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {i}: expected {name} {shape:?}, found {} {:?}",
                params.name(i),
                params.at(i).shape()
            )));
        }
    }
    let at = |n: &str| params.index_of(n).expect("validated above");
    let layers = (0..cfg.n_layers)
        .map(|l| {
            let p = |s: &str| at(&format!("layer{l}.{s}"));
            LayerIndex {
                ln1_g: p("ln1.gain"),
                ln1_b: p("ln1.bias"),
                wq: p("attn.wq"),
                bq: p("attn.bq"),
                wk: p("attn.wk"),
                bk: p("attn.bk"),
                wv: p("attn.wv"),
                bv: p("attn.bv"),
                wo: p("attn.wo"),
                bo: p("attn.bo"),
                ln2_g: p("ln2.gain"),
                ln2_b: p("ln2.bias"),
                w1: p("mlp.w1"),
                b1: p("mlp.b1"),
                w2: p("mlp.w2"),
                b2: p("mlp.b2"),
            }
        })
        .collect();
    Ok(ParamIndex {
        tok_emb: at("tok_emb"),
        patch_proj: at("patch_proj"),
        pos_emb: at("pos_emb"),
        row_emb: at("row_emb"),
        col_emb: at("col_emb"),
        layers,
        lnf_g: at("ln_f.gain"),
        lnf_b: at("ln_f.bias"),
        head: at("head"),
    })
}

/// Deterministic initialization from `cfg.seed`: N(0, 0.02) for embeddings,
/// projections and the head, N(0, 0.02 / sqrt(2 L)) for the two residual
/// output projections, ones for layer-norm gains, zeros for biases.
pub fn init_parameters<S: Scalar>(cfg: &ModelConfig) -> Result<ParamStore<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let residual_std = INIT_STD / ((2 * cfg.n_layers) as f64).sqrt();
    let mut store = ParamStore::new();
    for (name, shape) in param_layout(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if shape.len() == 1 {
            vec![0.0; n]
        } else {
            let std = if name.ends_with("attn.wo") || name.ends_with("mlp.w2") { residual_std } else { INIT_STD };
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        store.insert(name, Tensor::from_f64(shape, &data)?);
    }
    Ok(store)
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    index: ParamIndex,
}

impl<S: Scalar> Model<S> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = init_parameters(&config)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let index = build_index(&config, &params)?;
        Ok(Model { config, params, index })
    }

    pub fn index(&self) -> &ParamIndex {
        &self.index
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { config: self.config.clone(), params: self.params.cast(), index: self.index.clone() }
    }

    /// Binds the parameters as gradient leaves.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> Result<Net<'t, S>> {
        Ok(self.net(self.params.bind(tape)?))
    }

    /// Binds the parameters as constants.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<S>) -> Result<Net<'t, S>> {
        Ok(self.net(self.params.bind_frozen(tape)?))
    }

    /// Wraps parameters already recorded on a tape (aligned with this
    /// model's store).
    pub fn net<'t>(&self, params: BoundParams<'t, S>) -> Net<'t, S> {
        Net { params, cfg: self.config.clone(), ix: self.index.clone() }
    }
}

/// Per-layer keys and values of the positions processed so far.
pub struct KvCache<'t, S: Scalar> {
    keys: Vec<Option<Var<'t, S>>>,
    values: Vec<Option<Var<'t, S>>>,
    len: usize,
}

impl<'t, S: Scalar> KvCache<'t, S> {
    pub fn new(n_layers: usize) -> Self {
        KvCache { keys: vec![None; n_layers], values: vec![None; n_layers], len: 0 }
    }

    /// Number of positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Where latent-slot inputs come from in [`Net::run`].
#[derive(Clone, Copy)]
pub enum LatentSource<'a, 't, S: Scalar> {
    /// One `[1 x d]` input per latent slot, in order (teacher forcing).
    Provided(&'a [Var<'t, S>]),
    /// Each slot takes the post-norm hidden state of the preceding position.
    SelfGenerated,
}

pub struct RunOutput<'t, S: Scalar> {
    /// Post-final-layer-norm hidden states `[T x d]`.
    pub hidden: Var<'t, S>,
    /// The `[1 x d]` input fed to each latent slot, in order.
    pub latent_inputs: Vec<Var<'t, S>>,
}

/// A model bound to a tape.
pub struct Net<'t, S: Scalar> {
    pub params: BoundParams<'t, S>,
    cfg: ModelConfig,
    ix: ParamIndex,
}

/// The next-step input for a latent slot is the hidden state unchanged.
pub fn latent_feedback<'t, S: Scalar>(hidden_t: Var<'t, S>) -> Var<'t, S> {
    hidden_t
}

impl<'t, S: Scalar> Net<'t, S> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.params.at(0).tape()
    }

    fn p(&self, idx: usize) -> Var<'t, S> {
        self.params.at(idx)
    }

    /// Input embeddings for `elements` placed at positions `start..`.
    /// `latents` supplies one `[1 x d]` vector per latent slot in the chunk.
    pub fn embed_chunk(&self, elements: &[SequenceElement], start: usize, latents: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let end = start + elements.len();
        if end > self.cfg.max_seq {
            return Err(Error::TooLong { len: end, max: self.cfg.max_seq });
        }
        if elements.is_empty() {
            return Err(Error::Layout("empty chunk".into()));
        }
        let n_latent = elements.iter().filter(|e| e.is_latent()).count();
        if n_latent != latents.len() {
            return Err(Error::Layout(format!("{n_latent} latent slots but {} latent inputs", latents.len())));
        }
        let mut parts = Vec::new();
        let mut latent_iter = latents.iter();
        let mut i = 0;
        while i < elements.len() {
            match &elements[i].kind {
                ElementKind::Text(_) => {
                    let mut ids = Vec::new();
                    while let Some(ElementKind::Text(id)) = elements.get(i).map(|e| &e.kind) {
                        if *id >= self.cfg.vocab_size {
                            return Err(Error::Layout(format!("token id {id} outside vocabulary")));
                        }
                        ids.push(*id);
                        i += 1;
                    }
                    parts.push(self.p(self.ix.tok_emb).gather(ids)?);
                }
                ElementKind::Patch { .. } => {
                    let (mut feats, mut rows, mut cols) = (Vec::new(), Vec::new(), Vec::new());
                    while let Some(ElementKind::Patch { feature, row, col }) = elements.get(i).map(|e| &e.kind) {
                        feats.extend_from_slice(feature);
                        rows.push(*row);
                        cols.push(*col);
                        i += 1;
                    }
                    parts.push(self.embed_patches(&feats, &rows, &cols)?);
                }
                ElementKind::Latent(_) => {
                    let v = *latent_iter.next().expect("counted above");
                    if v.shape() != [1, self.cfg.d_model] {
                        return Err(Error::Layout(format!("latent input of shape {:?}", v.shape())));
                    }
                    parts.push(v);
                    i += 1;
                }
            }
        }
        let x = Var::concat(&parts, 0)?;
        let pos = self.p(self.ix.pos_emb).gather((start..end).collect())?;
        Ok(x.add(pos)?)
    }

    /// Patch projection plus row and column embeddings, without the 1-D
    /// position term. `feats` holds one feature vector per `(row, col)`.
    pub fn embed_patches(&self, feats: &[f64], rows: &[usize], cols: &[usize]) -> Result<Var<'t, S>> {
        let (n, dim) = (rows.len(), self.cfg.patch_feature_dim);
        if feats.len() != n * dim || cols.len() != n || n == 0 {
            return Err(Error::Layout(format!("{} patch features for {n} cells of width {dim}", feats.len())));
        }
        if let Some(i) = (0..n).find(|&i| rows[i] >= self.cfg.max_grid || cols[i] >= self.cfg.max_grid) {
            return Err(Error::Layout(format!("patch at ({}, {}) outside max_grid", rows[i], cols[i])));
        }
        let f = self.tape().constant(vec![n, dim], feats.iter().map(|&x| S::of(x)).collect())?;
        Ok(f.matmul(self.p(self.ix.patch_proj))?
            .add(self.p(self.ix.row_emb).gather(rows.to_vec())?)?
            .add(self.p(self.ix.col_emb).gather(cols.to_vec())?)?)
    }

    /// Runs `x [n x d]` (embedded positions `cache.len()..`) through the
    /// blocks and the final layer norm, extending the cache.
    pub fn forward_chunk(&self, cache: &mut KvCache<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let n = x.shape()[0];
        let (h, dh) = (self.cfg.n_heads, self.cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = x;
        for (l, ix) in self.ix.layers.iter().enumerate() {
            let xn = x.layer_norm(self.p(ix.ln1_g), self.p(ix.ln1_b))?;
            let q = xn.matmul(self.p(ix.wq))?.add(self.p(ix.bq))?;
            let k = xn.matmul(self.p(ix.wk))?.add(self.p(ix.bk))?;
            let v = xn.matmul(self.p(ix.wv))?.add(self.p(ix.bv))?;
            let k_all = match cache.keys[l] {
                Some(prev) => Var::concat(&[prev, k], 0)?,
                None => k,
            };
            let v_all = match cache.values[l] {
                Some(prev) => Var::concat(&[prev, v], 0)?,
                None => v,
            };
            cache.keys[l] = Some(k_all);
            cache.values[l] = Some(v_all);
            let mut heads = Vec::with_capacity(h);
            for hi in 0..h {
                let qh = q.slice(1, hi * dh, dh)?;
                let kh = k_all.slice(1, hi * dh, dh)?;
                let vh = v_all.slice(1, hi * dh, dh)?;
                let att = qh.matmul(kh.transpose()?)?.scale(scale)?.causal_softmax(cache.len)?;
                heads.push(att.matmul(vh)?);
            }
            let o = Var::concat(&heads, 1)?.matmul(self.p(ix.wo))?.add(self.p(ix.bo))?;
            x = x.add(o)?;
            let m = x
                .layer_norm(self.p(ix.ln2_g), self.p(ix.ln2_b))?
                .matmul(self.p(ix.w1))?
                .add(self.p(ix.b1))?
                .gelu()?
                .matmul(self.p(ix.w2))?
                .add(self.p(ix.b2))?;
            x = x.add(m)?;
        }
        cache.len += n;
        Ok(x.layer_norm(self.p(self.ix.lnf_g), self.p(self.ix.lnf_b))?)
    }

    /// Vocabulary logits for hidden rows.
    pub fn logits(&self, hidden: Var<'t, S>) -> Result<Var<'t, S>> {
        Ok(hidden.matmul(self.p(self.ix.head))?)
    }

    /// Full forward over a layout; latent slots take `latent_inputs`.
    pub fn forward(&self, layout: &SequenceLayout, latent_inputs: &[Var<'t, S>]) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let out = self.run(layout, LatentSource::Provided(latent_inputs))?;
        let logits = self.logits(out.hidden)?;
        Ok((out.hidden, logits))
    }

    /// Forward over a layout. With [`LatentSource::SelfGenerated`] the
    /// sequence is processed in chunks split at each latent slot, so every
    /// slot's input is the differentiable hidden state that precedes it.
    pub fn run(&self, layout: &SequenceLayout, source: LatentSource<'_, 't, S>) -> Result<RunOutput<'t, S>> {
        let els = &layout.elements;
        if els.len() > self.cfg.max_seq {
            return Err(Error::TooLong { len: els.len(), max: self.cfg.max_seq });
        }
        let mut cache = KvCache::new(self.cfg.n_layers);
        match source {
            LatentSource::Provided(latents) => {
                let x = self.embed_chunk(els, 0, latents)?;
                let hidden = self.forward_chunk(&mut cache, x)?;
                Ok(RunOutput { hidden, latent_inputs: latents.to_vec() })
            }
            LatentSource::SelfGenerated => {
                let mut chunks: Vec<Var<'t, S>> = Vec::new();
                let mut latent_inputs = Vec::new();
                let mut i = 0;
                while i < els.len() {
                    if els[i].is_latent() {
                        let prev = chunks.last().ok_or_else(|| Error::Layout("layout starts with a latent slot".into()))?;
                        let rows = prev.shape()[0];
                        let e = latent_feedback(prev.rows(rows - 1, 1)?);
                        let x = self.embed_chunk(&els[i..i + 1], i, &[e])?;
                        chunks.push(self.forward_chunk(&mut cache, x)?);
                        latent_inputs.push(e);
                        i += 1;
                    } else {
                        let start = i;
                        while i < els.len() && !els[i].is_latent() {
                            i += 1;
                        }
                        let x = self.embed_chunk(&els[start..i], start, &[])?;
                        chunks.push(self.forward_chunk(&mut cache, x)?);
                    }
                }
                Ok(RunOutput { hidden: Var::concat(&chunks, 0)?, latent_inputs })
            }
        }
    }
}
