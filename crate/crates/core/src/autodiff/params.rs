use std::collections::HashMap;

use crate::autodiff::{AutodiffError, Gradients, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Ordered, named parameter set. Order is insertion order and is what the
/// optimizer, checkpoints and gradient vectors are aligned to.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

/// One gradient buffer per parameter, aligned with a [`ParamStore`].
pub type ParamGrads<S> = Vec<Vec<S>>;

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let idx = self.names.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(tensor);
        idx
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>, AutodiffError> {
        self.index_of(name).map(|i| &self.tensors[i]).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>, AutodiffError> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(AutodiffError::UnknownParam(name.to_string())),
        }
    }

    pub fn at(&self, idx: usize) -> &Tensor<S> {
        &self.tensors[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Tensor<S> {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&self) -> ParamGrads<S> {
        self.tensors.iter().map(|t| vec![S::zero(); t.numel()]).collect()
    }

    /// Records every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> Result<BoundParams<'t, S>, AutodiffError> {
        self.bind_with(tape, true)
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<S>) -> Result<BoundParams<'t, S>, AutodiffError> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape<S>, grad: bool) -> Result<BoundParams<'t, S>, AutodiffError> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if grad {
                    tape.leaf(&t.clone().with_grad())
                } else {
                    tape.constant(t.shape().to_vec(), t.data().to_vec())
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BoundParams { vars })
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }
}

/// Parameters recorded on a tape, aligned with their store.
#[derive(Clone, Debug)]
pub struct BoundParams<'t, S: Scalar> {
    pub vars: Vec<Var<'t, S>>,
}

impl<'t, S: Scalar> BoundParams<'t, S> {
    pub fn at(&self, idx: usize) -> Var<'t, S> {
        self.vars[idx]
    }

    /// Gradients for every bound parameter, zero where it did not participate.
    pub fn grads(&self, g: &Gradients<S>) -> ParamGrads<S> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

/// `acc += other`, elementwise over aligned buffers.
pub(crate) fn accumulate<S: Scalar>(acc: &mut ParamGrads<S>, other: &ParamGrads<S>) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, &y) in a.iter_mut().zip(o) {
            *x += y;
        }
    }
}

pub(crate) fn scale_grads<S: Scalar>(g: &mut ParamGrads<S>, c: S) {
    g.iter_mut().flatten().for_each(|x| *x *= c);
}
