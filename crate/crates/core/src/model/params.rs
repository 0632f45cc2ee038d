use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;

use super::ModelError;
use crate::diffcore::{Tape, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count of parameters whose name starts with any of `prefixes`.
    pub fn count_with_prefix(&self, prefixes: &[&str]) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound, ModelError> {
        let mut vars = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.param(t.clone())?);
        }
        Ok(Bound { vars })
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradient per parameter after a backward pass; unreached parameters get zeros.
    pub fn gradients(&self, tape: &Tape, params: &ParamStore) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .map(|(name, t)| {
                let g = self
                    .vars
                    .get(name)
                    .and_then(|&v| tape.grad(v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Weight initializers.
pub(crate) enum Init {
    Zeros,
    /// Normal with std `gain / sqrt(fan_in)`.
    Scaled { fan_in: usize, gain: f64 },
}

pub(crate) fn init_tensor(rng: &mut impl Rng, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Scaled { fan_in, gain } => {
            let std = gain / (fan_in.max(1) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(shape, data).expect("length matches shape")
        }
    }
}
