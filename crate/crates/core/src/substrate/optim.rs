use super::params::ParamStore;
use super::tensor::Tensor;
use super::Real;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay and a constant learning rate.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Real> AdamW<S> {
    pub fn new(params: &ParamStore<S>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients stored on `params`.
    ///
    /// Every gradient is checked before anything is touched, so a non-finite
    /// gradient leaves parameters and moments exactly as they were.
    pub fn step(&mut self, params: &mut ParamStore<S>) -> Result<()> {
        self.update(params, true)
    }

    /// The same update without the decay term, i.e. plain Adam.
    pub fn step_adam(&mut self, params: &mut ParamStore<S>) -> Result<()> {
        self.update(params, false)
    }

    fn update(&mut self, params: &mut ParamStore<S>, decoupled_decay: bool) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::shape("adamw", &[self.m.len()], &[params.len()]));
        }
        for (p, m) in params.iter().zip(&self.m) {
            let Some(g) = &p.grad else {
                return Err(Error::Config(format!("parameter `{}` has no gradient", p.name)));
            };
            if g.shape() != p.tensor.shape() || m.shape() != p.tensor.shape() {
                return Err(Error::shape("adamw", p.tensor.shape(), g.shape()));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = S::of(self.lr);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let bc1 = S::one() - S::of(self.beta1.powi(t));
        let bc2 = S::one() - S::of(self.beta2.powi(t));
        let eps = S::of(self.eps);
        let shrink = S::one() - S::of(self.lr * self.weight_decay);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.as_ref().expect("checked above").data();
            let decay = decoupled_decay && p.decay;
            for (((w, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                if decay {
                    *w = *w * shrink;
                }
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// L2 norm of all gradients taken together.
pub fn global_grad_norm<S: Real>(params: &ParamStore<S>) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|&x| {
            let x = x.f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients uniformly so their global L2 norm is at most
/// `max_norm`. Returns the factor applied (1 when no clipping happened).
pub fn clip_gradients<S: Real>(params: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if !(norm > max_norm) || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = S::of(scale);
    for p in params.iter_mut() {
        if let Some(g) = &mut p.grad {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    scale
}
