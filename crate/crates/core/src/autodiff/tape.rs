use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use crate::autodiff::tensor::{numel, Tensor};
use crate::autodiff::AutodiffError;
use crate::scalar::{gemm_into, MatRef, Scalar};

pub type NodeId = usize;

/// Epsilon used by the fused layer-norm primitive.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Rows whose norm falls below this are rejected by the cosine loss.
pub const COSINE_MIN_NORM: f64 = 1e-8;

/// Every operation the tape can record, with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Elementwise; the right operand may broadcast over trailing dims.
    Add,
    Sub,
    Mul,
    MatMul,
    Transpose,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    EmbeddingGather { ids: Vec<usize> },
    /// Softmax over the last axis. With `causal_offset = Some(o)` row `i` only
    /// sees columns `j <= o + i`; the rest are exactly zero.
    Softmax { causal_offset: Option<usize> },
    LogSoftmax,
    Log,
    Exp,
    Gelu,
    /// Inputs: `x [.. x d]`, `gain [d]`, `bias [d]`.
    LayerNorm,
    MeanOverAxis { axis: usize },
    Sum,
    ScalarScale(f64),
    /// `out[i] = a[i, cols[i]]`.
    PickColumns { cols: Vec<usize> },
    CrossEntropy { targets: Vec<usize>, mask: Vec<bool> },
    CosineAlignment,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::EmbeddingGather { .. } => "embedding-gather",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LogSoftmax => "log-softmax",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Gelu => "gelu",
            Primitive::LayerNorm => "layer-norm",
            Primitive::MeanOverAxis { .. } => "mean-over-axis",
            Primitive::Sum => "sum",
            Primitive::ScalarScale(_) => "scalar-scale",
            Primitive::PickColumns { .. } => "pick-columns",
            Primitive::CrossEntropy { .. } => "cross-entropy",
            Primitive::CosineAlignment => "cosine-alignment",
        }
    }
}

enum Saved<S> {
    None,
    LayerNorm { xhat: Vec<S>, rstd: Vec<S> },
    Probs(Vec<S>),
    Cosine { norms_p: Vec<S>, norms_t: Vec<S>, cos: Vec<S> },
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    inputs: Vec<NodeId>,
    op: Option<Primitive>,
    saved: Saved<S>,
    requires_grad: bool,
}

/// Append-only record of one forward computation. Inputs of a node always
/// precede it, so reverse iteration is a valid topological order.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: NodeId,
}

impl<S: Scalar> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<S: Scalar> Copy for Var<'_, S> {}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<S: Scalar>(what: &str, data: &[S]) -> Result<(), AutodiffError> {
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(AutodiffError::NonFinite(format!("{what} (element {i})")));
    }
    Ok(())
}

fn shape_err(prim: &Primitive, shapes: &[&[usize]], why: &str) -> AutodiffError {
    AutodiffError::Shape(format!("{}: {why}; input shapes {shapes:?}", prim.name()))
}

/// `(outer, dim, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn ensure_live(&self) -> Result<(), AutodiffError> {
        if self.consumed.get() {
            Err(AutodiffError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&self, node: Node<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records a tensor as a leaf; it receives a gradient iff
    /// `tensor.requires_grad`.
    pub fn leaf(&self, tensor: &Tensor<S>) -> Result<Var<'_, S>, AutodiffError> {
        self.ensure_live()?;
        check_finite("leaf", tensor.data())?;
        Ok(self.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            inputs: vec![],
            op: None,
            saved: Saved::None,
            requires_grad: tensor.requires_grad,
        }))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<S>) -> Result<Var<'_, S>, AutodiffError> {
        self.ensure_live()?;
        if numel(&shape) != data.len() {
            return Err(AutodiffError::Shape(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        check_finite("constant", &data)?;
        Ok(self.push(Node { shape, value: data, inputs: vec![], op: None, saved: Saved::None, requires_grad: false }))
    }

    pub fn var(&self, id: NodeId) -> Var<'_, S> {
        assert!(id < self.len(), "node {id} not on tape");
        Var { tape: self, id }
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, [S]> {
        Ref::map(self.nodes.borrow(), |n| n[id].value.as_slice())
    }

    pub fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    /// Records `prim` applied to `inputs` and returns the output handle.
    pub fn apply<'t>(&'t self, prim: Primitive, inputs: &[Var<'t, S>]) -> Result<Var<'t, S>, AutodiffError> {
        self.ensure_live()?;
        for v in inputs {
            assert!(std::ptr::eq(v.tape, self), "var from another tape");
        }
        let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
        let node = {
            let nodes = self.nodes.borrow();
            let ins: Vec<&Node<S>> = ids.iter().map(|&i| &nodes[i]).collect();
            let (shape, value, saved) = forward(&prim, &ins)?;
            check_finite(prim.name(), &value)?;
            let requires_grad = ins.iter().any(|n| n.requires_grad);
            Node { shape, value, inputs: ids, op: Some(prim), saved, requires_grad }
        };
        Ok(self.push(node))
    }

    /// Reverse sweep from a scalar root. Marks the tape consumed.
    pub fn backward(&self, root: Var<'_, S>) -> Result<Gradients<S>, AutodiffError> {
        self.ensure_live()?;
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(AutodiffError::NotScalar(root_node.shape.clone()));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![S::one()]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(op, node, &g, &nodes, &mut grads);
            grads[id] = Some(g);
        }
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad && n.op.is_none()).collect();
        let shapes: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        Ok(Gradients { grads, leaf_requires: requires, sizes: shapes })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    leaf_requires: Vec<bool>,
    sizes: Vec<usize>,
}

impl<S: Scalar> Gradients<S> {
    /// Raw gradient of any node that participated in the root.
    pub fn get(&self, v: Var<'_, S>) -> Option<&[S]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when `v` did not participate.
    pub fn wrt(&self, v: Var<'_, S>) -> Vec<S> {
        self.wrt_id(v.id)
    }

    pub fn wrt_id(&self, id: NodeId) -> Vec<S> {
        match self.grads.get(id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![S::zero(); self.sizes[id]],
        }
    }

    /// Every leaf that asked for a gradient, in tape order.
    pub fn leaves(&self) -> impl Iterator<Item = (NodeId, Vec<S>)> + '_ {
        self.leaf_requires.iter().enumerate().filter(|(_, &r)| r).map(|(id, _)| (id, self.wrt_id(id)))
    }

    /// Copies the gradient of `v` into `tensor.grad`.
    pub fn fill_grad(&self, v: Var<'_, S>, tensor: &mut Tensor<S>) {
        tensor.grad = Some(self.wrt(v));
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || (a.len() >= b.len() && a.ends_with(b))
}

type Forward<S> = (Vec<usize>, Vec<S>, Saved<S>);

fn forward<S: Scalar>(prim: &Primitive, ins: &[&Node<S>]) -> Result<Forward<S>, AutodiffError> {
    let shapes: Vec<&[usize]> = ins.iter().map(|n| n.shape.as_slice()).collect();
    let arity = match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => 2,
        Primitive::CrossEntropy { .. } => 1,
        Primitive::CosineAlignment => 2,
        Primitive::LayerNorm => 3,
        Primitive::Concat { .. } => ins.len().max(1),
        _ => 1,
    };
    if ins.len() != arity {
        return Err(shape_err(prim, &shapes, &format!("expects {arity} inputs")));
    }
    let none = Saved::None;
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (ins[0], ins[1]);
            if !broadcast_ok(&a.shape, &b.shape) {
                return Err(shape_err(prim, &shapes, "operands do not broadcast"));
            }
            let nb = b.value.len();
            let out: Vec<S> = a
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = b.value[i % nb];
                    match prim {
                        Primitive::Add => x + y,
                        Primitive::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            Ok((a.shape.clone(), out, none))
        }
        Primitive::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(shape_err(prim, &shapes, "needs [m x k] . [k x n]"));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![S::zero(); m * n];
            gemm_into(MatRef::new(&a.value, m, k), MatRef::new(&b.value, k, n), &mut out, false);
            Ok((vec![m, n], out, none))
        }
        Primitive::Transpose => {
            let a = ins[0];
            if a.shape.len() != 2 {
                return Err(shape_err(prim, &shapes, "needs a 2-D input"));
            }
            let (m, n) = (a.shape[0], a.shape[1]);
            let mut out = vec![S::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.value[i * n + j];
                }
            }
            Ok((vec![n, m], out, none))
        }
        Primitive::Concat { axis } => {
            let first = &ins[0].shape;
            if *axis >= first.len() {
                return Err(shape_err(prim, &shapes, "axis out of range"));
            }
            for n in ins {
                let s = &n.shape;
                let compatible = s.len() == first.len()
                    && s.iter().zip(first.iter()).enumerate().all(|(d, (x, y))| d == *axis || x == y);
                if !compatible {
                    return Err(shape_err(prim, &shapes, "non-concatenated dims differ"));
                }
            }
            let mut shape = first.clone();
            shape[*axis] = ins.iter().map(|n| n.shape[*axis]).sum();
            let (outer, _, inner) = split_axis(first, *axis);
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for n in ins {
                    let chunk = n.shape[*axis] * inner;
                    out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
                }
            }
            Ok((shape, out, none))
        }
        Primitive::Slice { axis, start, len } => {
            let a = ins[0];
            if *axis >= a.shape.len() || *len == 0 || start + len > a.shape[*axis] {
                return Err(shape_err(prim, &shapes, &format!("slice [{start}, {}) out of range", start + len)));
            }
            let (outer, dim, inner) = split_axis(&a.shape, *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                out.extend_from_slice(&a.value[base..base + len * inner]);
            }
            let mut shape = a.shape.clone();
            shape[*axis] = *len;
            Ok((shape, out, none))
        }
        Primitive::EmbeddingGather { ids } => {
            let t = ins[0];
            if t.shape.len() != 2 || ids.is_empty() {
                return Err(shape_err(prim, &shapes, "needs a 2-D table and at least one id"));
            }
            let (v, d) = (t.shape[0], t.shape[1]);
            if let Some(bad) = ids.iter().find(|&&i| i >= v) {
                return Err(shape_err(prim, &shapes, &format!("id {bad} >= table rows {v}")));
            }
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(&t.value[i * d..(i + 1) * d]);
            }
            Ok((vec![ids.len(), d], out, none))
        }
        Primitive::Softmax { causal_offset } => {
            let a = ins[0];
            if a.shape.is_empty() {
                return Err(shape_err(prim, &shapes, "needs rank >= 1"));
            }
            if causal_offset.is_some() && a.shape.len() != 2 {
                return Err(shape_err(prim, &shapes, "causal softmax needs a 2-D input"));
            }
            let n = *a.shape.last().unwrap();
            let mut out = vec![S::zero(); a.value.len()];
            for (r, (row, o)) in a.value.chunks(n).zip(out.chunks_mut(n)).enumerate() {
                let visible = causal_offset.map_or(n, |off| (off + r + 1).min(n));
                softmax_row(&row[..visible], &mut o[..visible]);
            }
            Ok((a.shape.clone(), out, none))
        }
        Primitive::LogSoftmax => {
            let a = ins[0];
            if a.shape.is_empty() {
                return Err(shape_err(prim, &shapes, "needs rank >= 1"));
            }
            let n = *a.shape.last().unwrap();
            let mut out = vec![S::zero(); a.value.len()];
            for (row, o) in a.value.chunks(n).zip(out.chunks_mut(n)) {
                let lse = log_sum_exp(row);
                for (y, &x) in o.iter_mut().zip(row) {
                    *y = x - lse;
                }
            }
            Ok((a.shape.clone(), out, none))
        }
        Primitive::Log => Ok((ins[0].shape.clone(), ins[0].value.iter().map(|x| x.ln()).collect(), none)),
        Primitive::Exp => Ok((ins[0].shape.clone(), ins[0].value.iter().map(|x| x.exp()).collect(), none)),
        Primitive::Gelu => Ok((
            ins[0].shape.clone(),
            ins[0].value.iter().map(|&x| S::of(gelu_parts(x.f64()).0)).collect(),
            none,
        )),
        Primitive::LayerNorm => {
            let (x, g, b) = (ins[0], ins[1], ins[2]);
            let d = *x.shape.last().ok_or_else(|| shape_err(prim, &shapes, "needs rank >= 1"))?;
            if g.shape != [d] || b.shape != [d] {
                return Err(shape_err(prim, &shapes, "gain and bias must be [d]"));
            }
            let rows = x.value.len() / d;
            let mut out = vec![S::zero(); x.value.len()];
            let mut xhat = vec![S::zero(); x.value.len()];
            let mut rstd = vec![S::zero(); rows];
            let dn = S::of(d as f64);
            for r in 0..rows {
                let row = &x.value[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<S>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                let rs = S::one() / (var + S::of(LAYER_NORM_EPS)).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g.value[j] + b.value[j];
                }
            }
            Ok((x.shape.clone(), out, Saved::LayerNorm { xhat, rstd }))
        }
        Primitive::MeanOverAxis { axis } => {
            let a = ins[0];
            if *axis >= a.shape.len() {
                return Err(shape_err(prim, &shapes, "axis out of range"));
            }
            let (outer, dim, inner) = split_axis(&a.shape, *axis);
            let mut out = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..dim {
                    for i in 0..inner {
                        out[o * inner + i] += a.value[(o * dim + k) * inner + i];
                    }
                }
            }
            let dn = S::of(dim as f64);
            out.iter_mut().for_each(|x| *x /= dn);
            let mut shape = a.shape.clone();
            shape.remove(*axis);
            Ok((shape, out, none))
        }
        Primitive::Sum => Ok((vec![], vec![ins[0].value.iter().copied().sum()], none)),
        Primitive::ScalarScale(c) => {
            let c = S::of(*c);
            Ok((ins[0].shape.clone(), ins[0].value.iter().map(|&x| x * c).collect(), none))
        }
        Primitive::PickColumns { cols } => {
            let a = ins[0];
            if a.shape.len() != 2 || cols.len() != a.shape[0] {
                return Err(shape_err(prim, &shapes, &format!("needs [m x n] with m == {}", cols.len())));
            }
            let n = a.shape[1];
            if let Some(bad) = cols.iter().find(|&&c| c >= n) {
                return Err(shape_err(prim, &shapes, &format!("column {bad} >= {n}")));
            }
            let out = cols.iter().enumerate().map(|(i, &c)| a.value[i * n + c]).collect();
            Ok((vec![cols.len()], out, none))
        }
        Primitive::CrossEntropy { targets, mask } => {
            let a = ins[0];
            if a.shape.len() != 2 || targets.len() != a.shape[0] || mask.len() != a.shape[0] {
                return Err(shape_err(prim, &shapes, &format!("needs [T x V] with T == {}", targets.len())));
            }
            let (t, v) = (a.shape[0], a.shape[1]);
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(AutodiffError::EmptyMask);
            }
            let mut probs = vec![S::zero(); t * v];
            let mut total = S::zero();
            for r in 0..t {
                if !mask[r] {
                    continue;
                }
                if targets[r] >= v {
                    return Err(shape_err(prim, &shapes, &format!("target {} >= vocab {v}", targets[r])));
                }
                let row = &a.value[r * v..(r + 1) * v];
                let lse = log_sum_exp(row);
                total += lse - row[targets[r]];
                for j in 0..v {
                    probs[r * v + j] = (row[j] - lse).exp();
                }
            }
            Ok((vec![], vec![total / S::of(count as f64)], Saved::Probs(probs)))
        }
        Primitive::CosineAlignment => {
            let (p, t) = (ins[0], ins[1]);
            if p.shape.len() != 2 || p.shape != t.shape {
                return Err(shape_err(prim, &shapes, "needs two equal [k x d] inputs"));
            }
            let (k, d) = (p.shape[0], p.shape[1]);
            let mut norms_p = vec![S::zero(); k];
            let mut norms_t = vec![S::zero(); k];
            let mut cos = vec![S::zero(); k];
            let mut total = S::zero();
            for j in 0..k {
                let pr = &p.value[j * d..(j + 1) * d];
                let tr = &t.value[j * d..(j + 1) * d];
                let np = pr.iter().map(|&x| x * x).sum::<S>().sqrt();
                let nt = tr.iter().map(|&x| x * x).sum::<S>().sqrt();
                if np < S::of(COSINE_MIN_NORM) {
                    return Err(AutodiffError::ZeroNorm { which: "prediction", row: j });
                }
                if nt < S::of(COSINE_MIN_NORM) {
                    return Err(AutodiffError::ZeroNorm { which: "target", row: j });
                }
                let dot = pr.iter().zip(tr).map(|(&a, &b)| a * b).sum::<S>();
                let c = dot / (np * nt);
                norms_p[j] = np;
                norms_t[j] = nt;
                cos[j] = c;
                total += S::one() - c;
            }
            Ok((vec![], vec![total / S::of(k as f64)], Saved::Cosine { norms_p, norms_t, cos }))
        }
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<S>().ln()
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut z = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], id: NodeId, len: usize) -> &mut Vec<S> {
    grads[id].get_or_insert_with(|| vec![S::zero(); len])
}

fn backward_node<S: Scalar>(op: &Primitive, node: &Node<S>, g: &[S], nodes: &[Node<S>], grads: &mut [Option<Vec<S>>]) {
    let inp = |i: usize| &nodes[node.inputs[i]];
    let wants = |i: usize| nodes[node.inputs[i]].requires_grad;
    match op {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (inp(0), inp(1));
            let nb = b.value.len();
            if wants(0) {
                let ga = acc(grads, node.inputs[0], a.value.len());
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += match op {
                        Primitive::Mul => g[i] * b.value[i % nb],
                        _ => g[i],
                    };
                }
            }
            if wants(1) {
                let gb = acc(grads, node.inputs[1], nb);
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % nb] += match op {
                        Primitive::Add => gi,
                        Primitive::Sub => -gi,
                        _ => gi * a.value[i],
                    };
                }
            }
        }
        Primitive::MatMul => {
            let (a, b) = (inp(0), inp(1));
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            if wants(0) {
                let ga = acc(grads, node.inputs[0], m * k);
                gemm_into(MatRef::new(g, m, n), MatRef::new(&b.value, k, n).t(), ga, true);
            }
            if wants(1) {
                let gb = acc(grads, node.inputs[1], k * n);
                gemm_into(MatRef::new(&a.value, m, k).t(), MatRef::new(g, m, n), gb, true);
            }
        }
        Primitive::Transpose => {
            if wants(0) {
                let (m, n) = (inp(0).shape[0], inp(0).shape[1]);
                let ga = acc(grads, node.inputs[0], m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Primitive::Concat { axis } => {
            let (outer, _, inner) = split_axis(&node.shape, *axis);
            let total = node.shape[*axis] * inner;
            let mut offset = 0;
            for (idx, &id) in node.inputs.iter().enumerate() {
                let chunk = nodes[id].shape[*axis] * inner;
                if wants(idx) {
                    let gi = acc(grads, id, nodes[id].value.len());
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        for (d, &s) in gi[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Primitive::Slice { axis, start, len } => {
            if wants(0) {
                let a = inp(0);
                let (outer, dim, inner) = split_axis(&a.shape, *axis);
                let ga = acc(grads, node.inputs[0], a.value.len());
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &s) in ga[base..base + len * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Primitive::EmbeddingGather { ids } => {
            if wants(0) {
                let t = inp(0);
                let d = t.shape[1];
                let gt = acc(grads, node.inputs[0], t.value.len());
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Primitive::Softmax { .. } => {
            if wants(0) {
                let n = *node.shape.last().unwrap();
                let ga = acc(grads, node.inputs[0], node.value.len());
                for ((y, gr), out) in node.value.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: S = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        out[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Primitive::LogSoftmax => {
            if wants(0) {
                let n = *node.shape.last().unwrap();
                let ga = acc(grads, node.inputs[0], node.value.len());
                for ((y, gr), out) in node.value.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                    let total: S = gr.iter().copied().sum();
                    for j in 0..n {
                        out[j] += gr[j] - y[j].exp() * total;
                    }
                }
            }
        }
        Primitive::Log => {
            if wants(0) {
                let a = inp(0);
                let ga = acc(grads, node.inputs[0], a.value.len());
                for i in 0..ga.len() {
                    ga[i] += g[i] / a.value[i];
                }
            }
        }
        Primitive::Exp => {
            if wants(0) {
                let ga = acc(grads, node.inputs[0], node.value.len());
                for i in 0..ga.len() {
                    ga[i] += g[i] * node.value[i];
                }
            }
        }
        Primitive::Gelu => {
            if wants(0) {
                let a = inp(0);
                let ga = acc(grads, node.inputs[0], a.value.len());
                for i in 0..ga.len() {
                    ga[i] += g[i] * S::of(gelu_parts(a.value[i].f64()).1);
                }
            }
        }
        Primitive::LayerNorm => {
            let Saved::LayerNorm { xhat, rstd } = &node.saved else { unreachable!() };
            let d = *node.shape.last().unwrap();
            let rows = rstd.len();
            let gain = &inp(1).value;
            if wants(1) {
                let gg = acc(grads, node.inputs[1], d);
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if wants(2) {
                let gb = acc(grads, node.inputs[2], d);
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if wants(0) {
                let gx = acc(grads, node.inputs[0], rows * d);
                let dn = S::of(d as f64);
                for r in 0..rows {
                    let mut mean_dh = S::zero();
                    let mut mean_dh_h = S::zero();
                    for j in 0..d {
                        let dh = g[r * d + j] * gain[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + j];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for j in 0..d {
                        let dh = g[r * d + j] * gain[j];
                        gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                    }
                }
            }
        }
        Primitive::MeanOverAxis { axis } => {
            if wants(0) {
                let a = inp(0);
                let (outer, dim, inner) = split_axis(&a.shape, *axis);
                let dn = S::of(dim as f64);
                let ga = acc(grads, node.inputs[0], a.value.len());
                for o in 0..outer {
                    for k in 0..dim {
                        for i in 0..inner {
                            ga[(o * dim + k) * inner + i] += g[o * inner + i] / dn;
                        }
                    }
                }
            }
        }
        Primitive::Sum => {
            if wants(0) {
                let ga = acc(grads, node.inputs[0], inp(0).value.len());
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Primitive::ScalarScale(c) => {
            if wants(0) {
                let c = S::of(*c);
                let ga = acc(grads, node.inputs[0], node.value.len());
                for i in 0..ga.len() {
                    ga[i] += g[i] * c;
                }
            }
        }
        Primitive::PickColumns { cols } => {
            if wants(0) {
                let a = inp(0);
                let n = a.shape[1];
                let ga = acc(grads, node.inputs[0], a.value.len());
                for (i, &c) in cols.iter().enumerate() {
                    ga[i * n + c] += g[i];
                }
            }
        }
        Primitive::CrossEntropy { targets, mask } => {
            let Saved::Probs(probs) = &node.saved else { unreachable!() };
            if wants(0) {
                let a = inp(0);
                let v = a.shape[1];
                let count = S::of(mask.iter().filter(|&&m| m).count() as f64);
                let scale = g[0] / count;
                let ga = acc(grads, node.inputs[0], a.value.len());
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == t { S::one() } else { S::zero() };
                        ga[r * v + j] += scale * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
        Primitive::CosineAlignment => {
            let Saved::Cosine { norms_p, norms_t, cos } = &node.saved else { unreachable!() };
            let (p, t) = (inp(0), inp(1));
            let (k, d) = (p.shape[0], p.shape[1]);
            let scale = -g[0] / S::of(k as f64);
            for (which, (src, other, nsrc)) in
                [(&p.value, &t.value, norms_p), (&t.value, &p.value, norms_t)].into_iter().enumerate()
            {
                if !wants(which) {
                    continue;
                }
                let gi = acc(grads, node.inputs[which], k * d);
                for j in 0..k {
                    let inv = S::one() / (norms_p[j] * norms_t[j]);
                    let self_sq = nsrc[j] * nsrc[j];
                    for c in 0..d {
                        let dc = other[j * d + c] * inv - cos[j] * src[j * d + c] / self_sq;
                        gi[j * d + c] += scale * dc;
                    }
                }
            }
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> Ref<'t, [S]> {
        self.tape.value(self.id)
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.value().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(self.shape(), self.to_vec()).expect("tape values are well-formed")
    }

    pub fn item(&self) -> S {
        self.value()[0]
    }

    fn un(self, p: Primitive) -> Result<Self, AutodiffError> {
        self.tape.apply(p, &[self])
    }

    fn bin(self, p: Primitive, rhs: Self) -> Result<Self, AutodiffError> {
        self.tape.apply(p, &[self, rhs])
    }

    pub fn add(self, rhs: Self) -> Result<Self, AutodiffError> {
        self.bin(Primitive::Add, rhs)
    }
    pub fn sub(self, rhs: Self) -> Result<Self, AutodiffError> {
        self.bin(Primitive::Sub, rhs)
    }
    pub fn mul(self, rhs: Self) -> Result<Self, AutodiffError> {
        self.bin(Primitive::Mul, rhs)
    }
    pub fn matmul(self, rhs: Self) -> Result<Self, AutodiffError> {
        self.bin(Primitive::MatMul, rhs)
    }
    pub fn transpose(self) -> Result<Self, AutodiffError> {
        self.un(Primitive::Transpose)
    }
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self, AutodiffError> {
        self.un(Primitive::Slice { axis, start, len })
    }
    pub fn rows(self, start: usize, len: usize) -> Result<Self, AutodiffError> {
        self.slice(0, start, len)
    }
    pub fn gather(self, ids: Vec<usize>) -> Result<Self, AutodiffError> {
        self.un(Primitive::EmbeddingGather { ids })
    }
    pub fn softmax(self) -> Result<Self, AutodiffError> {
        self.un(Primitive::Softmax { causal_offset: None })
    }
    pub fn causal_softmax(self, offset: usize) -> Result<Self, AutodiffError> {
        self.un(Primitive::Softmax { causal_offset: Some(offset) })
    }
    pub fn log_softmax(self) -> Result<Self, AutodiffError> {
        self.un(Primitive::LogSoftmax)
    }
    pub fn ln(self) -> Result<Self, AutodiffError> {
        self.un(Primitive::Log)
    }
    pub fn exp(self) -> Result<Self, AutodiffError> {
        self.un(Primitive::Exp)
    }
    pub fn gelu(self) -> Result<Self, AutodiffError> {
        self.un(Primitive::Gelu)
    }
    pub fn layer_norm(self, gain: Self, bias: Self) -> Result<Self, AutodiffError> {
        self.tape.apply(Primitive::LayerNorm, &[self, gain, bias])
    }
    pub fn mean_axis(self, axis: usize) -> Result<Self, AutodiffError> {
        self.un(Primitive::MeanOverAxis { axis })
    }
    pub fn sum(self) -> Result<Self, AutodiffError> {
        self.un(Primitive::Sum)
    }
    pub fn scale(self, c: f64) -> Result<Self, AutodiffError> {
        self.un(Primitive::ScalarScale(c))
    }
    pub fn pick(self, cols: Vec<usize>) -> Result<Self, AutodiffError> {
        self.un(Primitive::PickColumns { cols })
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self, AutodiffError> {
        let first = parts.first().ok_or_else(|| AutodiffError::Shape("concat of nothing".into()))?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        first.tape.apply(Primitive::Concat { axis }, parts)
    }
}
