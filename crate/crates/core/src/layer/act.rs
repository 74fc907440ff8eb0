//! Adaptive computation time over the shared layer.
//!
//! Both variants see every step's column states `h_t` and halting units
//! `p̂_t = σ(W_H h_t + b_H)`; the discrete halting decisions are taken from
//! forward values and the readout is assembled from tape ops so gradients
//! reach `p̂` and the states.
//!
//! * [`ActVariant::A`]: `T = min(T_max, first t with Σ p̂ ≥ 1-ε)`, weights
//!   `p̂_t` before `T` and the remainder `R = 1 - Σ_{t<T} p̂_t` at `T`;
//!   `o = Σ p_t h_t`.
//! * [`ActVariant::U`]: running-average readout
//!   `o_t = w_t h_t + (1 - w_t) o_{t-1}`, where a column that never crosses
//!   the threshold gets no remainder.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMask;
use crate::error::{Error, Result};
use crate::substrate::{Bound, Init, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_REG_WEIGHT: f64 = 0.03;
/// Initial halting bias.
pub const HALT_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActVariant {
    A,
    U,
}

impl fmt::Display for ActVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActVariant::A => "A",
            ActVariant::U => "U",
        })
    }
}

impl FromStr for ActVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(ActVariant::A),
            "U" | "u" => Ok(ActVariant::U),
            _ => Err(Error::Config(format!("unknown ACT variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActConfig {
    pub variant: ActVariant,
    pub t_max: usize,
    pub epsilon: f64,
    pub reg_weight: f64,
}

impl ActConfig {
    pub fn new(variant: ActVariant, t_max: usize) -> Self {
        Self {
            variant,
            t_max,
            epsilon: DEFAULT_EPSILON,
            reg_weight: DEFAULT_REG_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max < 1 {
            return Err(Error::Config("ACT t_max must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("ACT epsilon {} not in (0, 1)", self.epsilon)));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::Config(format!("ACT weight {} must be non-negative", self.reg_weight)));
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        1.0 - self.epsilon
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ActParams {
    pub w_h: ParamId,
    pub b_h: ParamId,
}

impl ActParams {
    pub fn new<S: Real>(store: &mut ParamStore<S>, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w_h: store.add(&format!("{prefix}.w_h"), &[d, 1], Init::FanIn, true, rng)?,
            b_h: store.add(&format!("{prefix}.b_h"), &[1], Init::Const(HALT_BIAS_INIT), false, rng)?,
        })
    }
}

/// `p̂ = σ(h W_H + b_H)`, shape `[rows, 1]`.
pub fn act_halting<S: Real>(t: &mut Tape<S>, p: &Bound, params: &ActParams, h: Var) -> Result<Var> {
    let z = t.linear(h, p[params.w_h], Some(p[params.b_h]))?;
    Ok(t.sigmoid(z))
}

/// Readout produced when the ACT loop ends.
#[derive(Debug, Clone)]
pub struct ActOutput {
    /// `[rows, d]`
    pub out: Var,
    /// Remainder per column `[rows, 1]`; zero for pad columns.
    pub remainder: Var,
    /// `reg_weight · mean(R)` over valid columns (scalar).
    pub loss: Var,
    /// Readout steps per column (0 for pad columns).
    pub ponder: Vec<usize>,
    /// Whether each column crossed the threshold before `t_max` ran out.
    pub halted: Vec<bool>,
    /// Halting weight given to each step, per column, `[step][row]`.
    pub weights: Vec<Vec<f64>>,
}

/// Incremental ACT bookkeeping, fed one step at a time.
pub struct ActState {
    config: ActConfig,
    valid: Vec<bool>,
    d: usize,
    step: usize,
    /// Forward values of the running halting mass.
    cum: Vec<f64>,
    done: Vec<bool>,
    crossed: Vec<bool>,
    ponder: Vec<usize>,
    /// Tape handles for the running halting mass, remainder and readout.
    cum_var: Option<Var>,
    rem_var: Option<Var>,
    out_var: Option<Var>,
    weights: Vec<Vec<f64>>,
}

impl ActState {
    pub fn new(config: ActConfig, mask: &AttentionMask, d: usize) -> Result<Self> {
        config.validate()?;
        let rows = mask.rows();
        Ok(Self {
            config,
            valid: mask.valid.clone(),
            d,
            step: 0,
            cum: vec![0.0; rows],
            done: mask.valid.iter().map(|v| !v).collect(),
            crossed: vec![false; rows],
            ponder: vec![0; rows],
            cum_var: None,
            rem_var: None,
            out_var: None,
            weights: Vec::new(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// True once every valid column has its readout fixed.
    pub fn all_halted(&self) -> bool {
        self.done.iter().all(|&d| d)
    }

    pub fn finished(&self) -> bool {
        self.all_halted() || self.step >= self.config.t_max
    }

    fn column<S: Real>(t: &mut Tape<S>, v: &[f64]) -> Var {
        t.constant(Tensor::new(&[v.len(), 1], v.iter().map(|&x| S::of(x)).collect()).expect("column"))
    }

    fn acc<S: Real>(t: &mut Tape<S>, slot: &mut Option<Var>, x: Var) -> Result<()> {
        *slot = Some(match *slot {
            Some(prev) => t.add(prev, x)?,
            None => x,
        });
        Ok(())
    }

    /// Feeds the state after one more step and its halting units `p̂`.
    pub fn update<S: Real>(&mut self, t: &mut Tape<S>, state: Var, p_hat: Var) -> Result<()> {
        let rows = self.valid.len();
        if t.shape(state) != [rows, self.d] || t.shape(p_hat) != [rows, 1] {
            return Err(Error::shape("act_update", t.shape(state), t.shape(p_hat)));
        }
        if self.step >= self.config.t_max {
            return Err(Error::Config(format!("ACT already ran {} steps", self.config.t_max)));
        }
        self.step += 1;
        let last = self.step == self.config.t_max;
        let thr = self.config.threshold();
        let pv: Vec<f64> = t.value(p_hat).iter().map(|x| x.f64()).collect();
        // running: keeps accumulating p̂; halting: takes the remainder now.
        let mut running = vec![0.0; rows];
        let mut halting = vec![0.0; rows];
        for r in 0..rows {
            if self.done[r] {
                continue;
            }
            self.ponder[r] = self.step;
            let (crosses, take_rem) = match self.config.variant {
                ActVariant::A => {
                    let c = self.cum[r] + pv[r] >= thr;
                    (c, c || last)
                }
                ActVariant::U => {
                    let c = self.cum[r] + pv[r] > thr;
                    (c, c)
                }
            };
            if take_rem {
                halting[r] = 1.0;
                self.crossed[r] = crosses;
                self.done[r] = true;
            } else {
                running[r] = 1.0;
                self.cum[r] += pv[r];
                if last {
                    self.done[r] = true;
                }
            }
        }
        let running_c = Self::column(t, &running);
        let halting_c = Self::column(t, &halting);
        let p_run = t.mul(p_hat, running_c)?;
        // R = 1 - cum for columns halting now (cum excludes this step).
        let left = match self.cum_var {
            Some(c) => t.one_minus(c),
            None => Self::column(t, &vec![1.0; rows]),
        };
        let rem = t.mul(left, halting_c)?;
        let w = t.add(p_run, rem)?;
        Self::acc(t, &mut self.cum_var, p_run)?;
        Self::acc(t, &mut self.rem_var, rem)?;
        self.weights.push(t.value(w).iter().map(|x| x.f64()).collect());
        let contrib = t.mul(w, state)?;
        self.out_var = Some(match (self.config.variant, self.out_var) {
            (_, None) => contrib,
            (ActVariant::A, Some(o)) => t.add(o, contrib)?,
            (ActVariant::U, Some(o)) => {
                let keep = t.one_minus(w);
                let kept = t.mul(o, keep)?;
                t.add(kept, contrib)?
            }
        });
        Ok(())
    }

    pub fn finish<S: Real>(self, t: &mut Tape<S>) -> Result<ActOutput> {
        let (out, remainder) = match (self.out_var, self.rem_var) {
            (Some(o), Some(r)) => (o, r),
            _ => return Err(Error::Config("ACT finished before any step".into())),
        };
        let n_valid = self.valid.iter().filter(|&&v| v).count().max(1);
        let total = t.sum(remainder);
        let loss = t.scale(total, S::of(self.config.reg_weight / n_valid as f64));
        Ok(ActOutput {
            out,
            remainder,
            loss,
            ponder: self.ponder,
            halted: self.crossed,
            weights: self.weights,
        })
    }
}
