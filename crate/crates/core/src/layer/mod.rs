//! The shared encoder step: copy-gated and plain post-norm Transformer
//! layers, and the adaptive computation time readouts.

pub mod act;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionKind, AttentionMask, AttentionParams};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::substrate::{Bound, Init, ParamId, ParamStore, Real, Tape, Var};

pub use act::{act_halting, ActConfig, ActOutput, ActParams, ActState, ActVariant};

/// Initial bias of the gate's output unit; `sigmoid(-3) ≈ 0.0474`.
pub const GATE_BIAS_INIT: f64 = -3.0;

/// Normalizer applied to the data FFN output of a gated layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    LayerNorm,
    Tanh,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::LayerNorm => "layernorm",
            Norm::Tanh => "tanh",
        }
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layernorm" => Ok(Norm::LayerNorm),
            "tanh" => Ok(Norm::Tanh),
            _ => Err(Error::Config(format!("unknown norm `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerVariant {
    pub attention: AttentionKind,
    pub gated: bool,
    pub norm: Norm,
}

impl LayerVariant {
    pub const PRESETS: [(&'static str, LayerVariant); 6] = [
        ("standard", LayerVariant::ungated(AttentionKind::StandardAbs)),
        ("relative", LayerVariant::ungated(AttentionKind::Relative)),
        ("geometric", LayerVariant::ungated(AttentionKind::Geometric)),
        ("rel_gate", LayerVariant::gated(AttentionKind::Relative, Norm::Tanh)),
        ("abs_rel_gate", LayerVariant::gated(AttentionKind::AbsRelGated, Norm::Tanh)),
        ("ndr", LayerVariant::gated(AttentionKind::Geometric, Norm::LayerNorm)),
    ];

    pub const fn ungated(attention: AttentionKind) -> Self {
        Self {
            attention,
            gated: false,
            norm: Norm::LayerNorm,
        }
    }

    pub const fn gated(attention: AttentionKind, norm: Norm) -> Self {
        Self {
            attention,
            gated: true,
            norm,
        }
    }

    pub fn ndr() -> Self {
        Self::gated(AttentionKind::Geometric, Norm::LayerNorm)
    }

    /// Preset name, or a `attention+gate+norm` description for custom
    /// combinations.
    pub fn name(&self) -> String {
        Self::PRESETS
            .iter()
            .find(|(_, v)| v == self)
            .map(|(n, _)| n.to_string())
            .unwrap_or_else(|| {
                if self.gated {
                    format!("{}+gate+{}", self.attention, self.norm.as_str())
                } else {
                    self.attention.to_string()
                }
            })
    }
}

impl fmt::Display for LayerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for LayerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some((_, v)) = Self::PRESETS.iter().find(|(n, _)| *n == s) {
            return Ok(*v);
        }
        let parts: Vec<&str> = s.split('+').collect();
        match parts.as_slice() {
            [att, "gate", norm] => Ok(Self::gated(att.parse()?, norm.parse()?)),
            [att] => Ok(Self::ungated(att.parse()?)),
            _ => Err(Error::Config(format!("unknown layer variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub variant: LayerVariant,
    /// Dropout on the data FFN hidden layer.
    pub dropout: f64,
    /// Dropout on attention query components.
    pub attention_dropout: f64,
}

impl LayerConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            kind: self.variant.attention,
            content_dropout: self.attention_dropout,
            position_dropout: self.attention_dropout,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Ffn {
    fn new<S: Real>(store: &mut ParamStore<S>, prefix: &str, d_in: usize, d_hidden: usize, b2_init: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w1: store.add(&format!("{prefix}.w1"), &[d_in, d_hidden], Init::FanIn, true, rng)?,
            b1: store.add(&format!("{prefix}.b1"), &[d_hidden], Init::Const(0.0), false, rng)?,
            w2: store.add(&format!("{prefix}.w2"), &[d_hidden, d_in], Init::FanIn, true, rng)?,
            b2: store.add(&format!("{prefix}.b2"), &[d_in], Init::Const(b2_init), false, rng)?,
        })
    }

    /// `W2 relu(W1 x + b1) + b2`, with dropout on the hidden layer.
    fn apply<S: Real>(&self, t: &mut Tape<S>, p: &Bound, x: Var, dropout: f64, rng: Option<&mut StreamRng>) -> Result<Var> {
        let hidden = t.linear(x, p[self.w1], Some(p[self.b1]))?;
        let mut hidden = t.relu(hidden);
        if let Some(r) = rng {
            hidden = t.dropout(hidden, dropout, r)?;
        }
        t.linear(hidden, p[self.w2], Some(p[self.b2]))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norms {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norms {
    fn new<S: Real>(store: &mut ParamStore<S>, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{prefix}.gain"), &[d], Init::Const(1.0), false, rng)?,
            bias: store.add(&format!("{prefix}.bias"), &[d], Init::Const(0.0), false, rng)?,
        })
    }
}

/// Parameters of the single layer shared by every step.
#[derive(Debug, Clone)]
pub struct GatedLayerParams {
    pub config: LayerConfig,
    pub attention: AttentionParams,
    pub ln1: Norms,
    pub ffn_data: Ffn,
    /// Second layer norm: after the data FFN (gated, layernorm) or around
    /// the FFN residual (ungated). Absent for tanh-normalized gated layers.
    pub ln2: Option<Norms>,
    pub ffn_gate: Option<Ffn>,
}

/// Output of one step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `[B*N, d]`
    pub out: Var,
    /// Attention weights `[B, H, N, N]`.
    pub attention: Var,
    /// Gate activations `[B*N, d]` for gated layers.
    pub gate: Option<Var>,
}

impl GatedLayerParams {
    pub fn new<S: Real>(store: &mut ParamStore<S>, prefix: &str, config: LayerConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", config.dropout)));
        }
        let d = config.d_model;
        let attention = AttentionParams::new(store, &format!("{prefix}.att"), config.attention(), rng)?;
        let ln1 = Norms::new(store, &format!("{prefix}.ln1"), d, rng)?;
        let ffn_data = Ffn::new(store, &format!("{prefix}.ffn"), d, config.d_ff, 0.0, rng)?;
        let v = config.variant;
        let ln2 = if !v.gated || v.norm == Norm::LayerNorm {
            Some(Norms::new(store, &format!("{prefix}.ln2"), d, rng)?)
        } else {
            None
        };
        let ffn_gate = if v.gated {
            Some(Ffn::new(store, &format!("{prefix}.gate"), d, d, GATE_BIAS_INIT, rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            attention,
            ln1,
            ffn_data,
            ln2,
            ffn_gate,
        })
    }

    /// One step of the configured variant. `rng` enables dropout.
    pub fn step<S: Real>(&self, t: &mut Tape<S>, p: &Bound, h: Var, mask: &AttentionMask, rng: Option<&mut StreamRng>) -> Result<StepOutput> {
        if self.config.variant.gated {
            self.gated_step(t, p, h, mask, rng)
        } else {
            self.ungated_step(t, p, h, mask, rng)
        }
    }

    /// `a = LN(MHA(h) + h)`, `u = Norm(FFN_data(a))`, `g = σ(FFN_gate(a))`,
    /// `out = g⊙u + (1-g)⊙h`. Pad columns are returned unchanged.
    pub fn gated_step<S: Real>(&self, t: &mut Tape<S>, p: &Bound, h: Var, mask: &AttentionMask, mut rng: Option<&mut StreamRng>) -> Result<StepOutput> {
        let gate_ffn = self
            .ffn_gate
            .ok_or_else(|| Error::Unsupported("gated_step on an ungated layer".into()))?;
        let att = self.attention.forward(t, p, h, mask, rng.as_deref_mut())?;
        let res = t.add(att.out, h)?;
        let a = t.layer_norm(res, p[self.ln1.gain], p[self.ln1.bias])?;
        let f = self.ffn_data.apply(t, p, a, self.config.dropout, rng)?;
        let u = match (self.config.variant.norm, self.ln2) {
            (Norm::LayerNorm, Some(ln)) => t.layer_norm(f, p[ln.gain], p[ln.bias])?,
            _ => t.tanh(f),
        };
        let gl = gate_ffn.apply(t, p, a, 0.0, None)?;
        let g = t.sigmoid(gl);
        let gu = t.mul(g, u)?;
        let keep = t.one_minus(g);
        let gh = t.mul(keep, h)?;
        let mixed = t.add(gu, gh)?;
        let out = t.select_rows(&mask.valid, mixed, h)?;
        Ok(StepOutput {
            out,
            attention: att.weights,
            gate: Some(g),
        })
    }

    /// Post-norm encoder layer: `a = LN1(MHA(h) + h)`, `out = LN2(FFN(a) + a)`.
    pub fn ungated_step<S: Real>(&self, t: &mut Tape<S>, p: &Bound, h: Var, mask: &AttentionMask, mut rng: Option<&mut StreamRng>) -> Result<StepOutput> {
        let ln2 = self
            .ln2
            .ok_or_else(|| Error::Unsupported("ungated_step without a second norm".into()))?;
        let att = self.attention.forward(t, p, h, mask, rng.as_deref_mut())?;
        let res = t.add(att.out, h)?;
        let a = t.layer_norm(res, p[self.ln1.gain], p[self.ln1.bias])?;
        let f = self.ffn_data.apply(t, p, a, self.config.dropout, rng)?;
        let res2 = t.add(f, a)?;
        let mixed = t.layer_norm(res2, p[ln2.gain], p[ln2.bias])?;
        let out = t.select_rows(&mask.valid, mixed, h)?;
        Ok(StepOutput {
            out,
            attention: att.weights,
            gate: None,
        })
    }
}

#[cfg(test)]
mod tests;
