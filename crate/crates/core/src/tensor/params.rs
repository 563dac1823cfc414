use std::collections::HashMap;

use super::{Grads, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Named parameters in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total scalar count of parameters whose name satisfies `filter`.
    pub fn count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(n, _)| filter(n)).map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter on `tape` as a leaf. Parameters rejected by
    /// `trainable` are recorded without gradient tracking.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> BoundParams<'_, T> {
        let mask = self.mask(trainable);
        self.bind_masked(tape, &mask)
    }

    /// As [`ParamSet::bind`], with a precomputed per-parameter mask.
    pub fn bind_masked(&self, tape: &mut Tape<T>, trainable: &[bool]) -> BoundParams<'_, T> {
        let vars = self
            .tensors
            .iter()
            .zip(trainable)
            .map(|(t, &train)| tape.leaf(t.clone(), train))
            .collect();
        BoundParams { set: self, vars }
    }

    /// Wraps vars already on a tape, one per parameter in set order.
    pub fn attach(&self, vars: Vec<Var>) -> Result<BoundParams<'_, T>> {
        if vars.len() != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "attach",
                lhs: vec![self.len()],
                rhs: vec![vars.len()],
            });
        }
        Ok(BoundParams { set: self, vars })
    }

    pub fn mask(&self, trainable: impl Fn(&str) -> bool) -> Vec<bool> {
        self.names.iter().map(|n| trainable(n)).collect()
    }
}

/// Parameters of a [`ParamSet`] recorded on a tape.
pub struct BoundParams<'a, T> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> BoundParams<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.set
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Gradients aligned with the parameter set; `None` for frozen or unused
    /// parameters.
    pub fn collect(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| grads.take(*v)).collect()
    }
}
