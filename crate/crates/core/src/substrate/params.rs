use std::collections::HashMap;

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use super::Real;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Weight matrices decay; biases, gains and scalar coefficients do not.
    pub decay: bool,
    pub grad: Option<Tensor<S>>,
}

/// Named, ordered parameter collection.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, usize>,
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`, `fan_in` taken from the first axis.
    FanIn,
    /// Uniform with unit variance.
    Unit,
    /// Uniform in `±bound`.
    Uniform(f64),
    Const(f64),
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, decay: bool, rng: &mut impl Rng) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let tensor = match init {
            Init::FanIn => {
                let bound = 1.0 / (shape.first().copied().unwrap_or(1).max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| S::of(rng.gen_range(-bound..bound)))
            }
            Init::Unit => {
                let bound = 3f64.sqrt();
                Tensor::from_fn(shape, |_| S::of(rng.gen_range(-bound..bound)))
            }
            Init::Uniform(bound) => Tensor::from_fn(shape, |_| S::of(rng.gen_range(-bound..=bound))),
            Init::Const(c) => Tensor::full(shape, S::of(c)),
        };
        let id = ParamId(self.params.len());
        self.by_name.insert(name.to_string(), id.0);
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            decay,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf(p.tensor.clone(), true))
                .collect(),
        )
    }

    /// Copies gradients for bound parameters out of a finished backward pass.
    /// Parameters the loss does not reach get a zero gradient.
    pub fn collect_grads(&mut self, bound: &Bound, grads: &mut Gradients<S>) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            let g = grads
                .take(v)
                .unwrap_or_else(|| vec![S::zero(); p.tensor.len()]);
            p.grad = Some(Tensor::new(p.tensor.shape(), g).expect("gradient matches parameter shape"));
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// All values concatenated in registration order.
    pub fn flatten(&self) -> Vec<S> {
        self.params.iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }

    pub fn flatten_grads(&self) -> Vec<S> {
        self.params
            .iter()
            .flat_map(|p| match &p.grad {
                Some(g) => g.data().to_vec(),
                None => vec![S::zero(); p.tensor.len()],
            })
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::shape("assign_flat", &[self.numel()], &[flat.len()]));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Same parameters in another precision.
    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    decay: p.decay,
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
