//! Attention score and weight computations for every layer variant:
//! standard multi-head attention with absolute positions, relative
//! positional attention, the gated absolute/relative blend, and geometric
//! attention with directional encoding.

pub mod geometric;
pub mod relative;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::substrate::{Bound, Init, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub use geometric::{closeness_order, geometric_from_logits, geometric_weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    StandardAbs,
    Relative,
    AbsRelGated,
    Geometric,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::StandardAbs,
        AttentionKind::Relative,
        AttentionKind::AbsRelGated,
        AttentionKind::Geometric,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::StandardAbs => "standard_abs",
            AttentionKind::Relative => "relative",
            AttentionKind::AbsRelGated => "abs_rel_gated",
            AttentionKind::Geometric => "geometric",
        }
    }

    /// Softmax-normalized kinds produce rows summing to one.
    pub fn is_softmax(self) -> bool {
        self != AttentionKind::Geometric
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub kind: AttentionKind,
    /// Dropout on the content query.
    pub content_dropout: f64,
    /// Dropout on the position query (relative kinds only).
    pub position_dropout: f64,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, kind: AttentionKind) -> Self {
        Self {
            d_model,
            n_heads,
            kind,
            content_dropout: 0.0,
            position_dropout: 0.0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for p in [self.content_dropout, self.position_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("attention dropout {p} not in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Validity of each position of a padded batch (`true` = real token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub batch: usize,
    pub len: usize,
    pub valid: Vec<bool>,
}

impl AttentionMask {
    pub fn full(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            valid: vec![true; batch * len],
        }
    }

    /// Left-aligned sequences of the given lengths padded to `len`.
    pub fn from_lengths(lengths: &[usize], len: usize) -> Self {
        let valid = lengths
            .iter()
            .flat_map(|&l| (0..len).map(move |j| j < l))
            .collect();
        Self {
            batch: lengths.len(),
            len,
            valid,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    fn check_nonempty(&self) -> Result<()> {
        for b in 0..self.batch {
            if !self.valid[b * self.len..(b + 1) * self.len].iter().any(|&v| v) {
                return Err(Error::AllSourcesMasked { batch: b, target: 0 });
            }
        }
        Ok(())
    }
}

/// Parameters specific to the positional scheme of each kind.
#[derive(Debug, Clone)]
pub enum PositionParams {
    /// Positions enter through the embeddings.
    Absolute,
    Relative {
        w_kp: ParamId,
        b_qe: ParamId,
        b_qp: ParamId,
        /// `(W_ar, b_ar)` for the absolute/relative blend.
        gate: Option<(ParamId, ParamId)>,
    },
    Geometric {
        b_q: ParamId,
        w_lr: ParamId,
        b_lr: ParamId,
        w_rl: ParamId,
        b_rl: ParamId,
        alpha: ParamId,
        beta: ParamId,
        gamma: ParamId,
    },
}

/// Multi-head attention parameters. Value and output projections are shared
/// by all kinds; only the score computation differs.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub config: AttentionConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub position: PositionParams,
}

/// Result of one attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[batch * len, d_model]`
    pub out: Var,
    /// Normalized weights `[batch, heads, len, len]`.
    pub weights: Var,
}

impl AttentionParams {
    pub fn new<S: Real>(store: &mut ParamStore<S>, prefix: &str, config: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.n_heads;
        let dh = config.d_head();
        let mut mat = |name: &str, shape: &[usize]| store.add(&format!("{prefix}.{name}"), shape, Init::FanIn, true, rng);
        let w_q = mat("w_q", &[d, d])?;
        let w_k = mat("w_k", &[d, d])?;
        let w_v = mat("w_v", &[d, d])?;
        let w_o = mat("w_o", &[d, d])?;
        let mut extra_mats = Vec::new();
        if config.kind == AttentionKind::Relative || config.kind == AttentionKind::AbsRelGated {
            extra_mats.push(mat("w_kp", &[d, d])?);
        }
        if config.kind == AttentionKind::AbsRelGated {
            extra_mats.push(mat("w_ar", &[d, 1])?);
        }
        if config.kind == AttentionKind::Geometric {
            extra_mats.push(mat("w_lr", &[d, h])?);
            extra_mats.push(mat("w_rl", &[d, h])?);
        }
        let mut cst = |name: &str, shape: &[usize], v: f64| store.add(&format!("{prefix}.{name}"), shape, Init::Const(v), false, rng);
        let b_o = cst("b_o", &[d], 0.0)?;
        let position = match config.kind {
            AttentionKind::StandardAbs => PositionParams::Absolute,
            AttentionKind::Relative | AttentionKind::AbsRelGated => {
                let b_qe = cst("b_qe", &[d], 0.0)?;
                let b_qp = cst("b_qp", &[d], 0.0)?;
                let gate = if config.kind == AttentionKind::AbsRelGated {
                    Some((extra_mats[1], cst("b_ar", &[1], 0.0)?))
                } else {
                    None
                };
                PositionParams::Relative {
                    w_kp: extra_mats[0],
                    b_qe,
                    b_qp,
                    gate,
                }
            }
            AttentionKind::Geometric => PositionParams::Geometric {
                b_q: cst("b_q", &[d], 0.0)?,
                w_lr: extra_mats[0],
                b_lr: cst("b_lr", &[h], 0.0)?,
                w_rl: extra_mats[1],
                b_rl: cst("b_rl", &[h], 0.0)?,
                alpha: cst("alpha", &[h], 1.0 / (dh as f64).sqrt())?,
                beta: cst("beta", &[h], 1.0)?,
                gamma: cst("gamma", &[h], 0.0)?,
            },
        };
        Ok(Self {
            config,
            w_q,
            w_k,
            w_v,
            w_o,
            b_o,
            position,
        })
    }

    /// `[B*N, d]` → `[B, H, N, dh]`
    fn split_heads<S: Real>(&self, t: &mut Tape<S>, x: Var, mask: &AttentionMask) -> Result<Var> {
        let (h, dh) = (self.config.n_heads, self.config.d_head());
        let r = t.reshape(x, &[mask.batch, mask.len, h, dh])?;
        t.permute(r, &[0, 2, 1, 3])
    }

    /// `[B, H, N, dh]` → `[B*N, d]`
    fn merge_heads<S: Real>(&self, t: &mut Tape<S>, x: Var, mask: &AttentionMask) -> Result<Var> {
        let p = t.permute(x, &[0, 2, 1, 3])?;
        t.reshape(p, &[mask.rows(), self.config.d_model])
    }

    /// Scores of per-head queries `[B, H, N, dh]` against keys projected from
    /// a position table `[R, d]` through `w`, giving `[B, H, N, R]`.
    fn position_scores<S: Real>(&self, t: &mut Tape<S>, query: Var, table: Tensor<S>, w: Var, mask: &AttentionMask) -> Result<Var> {
        let (h, dh) = (self.config.n_heads, self.config.d_head());
        let rows = table.shape()[0];
        let pe = t.constant(table);
        let keys = t.matmul(pe, w)?;
        let keys = t.reshape(keys, &[rows, h, dh])?;
        let keys = t.permute(keys, &[1, 0, 2])?;
        let q = t.permute(query, &[1, 0, 2, 3])?;
        let q = t.reshape(q, &[h, mask.rows(), dh])?;
        let s = t.matmul_t(q, keys, false, true)?;
        let s = t.reshape(s, &[h, mask.batch, mask.len, rows])?;
        t.permute(s, &[1, 0, 2, 3])
    }

    fn maybe_dropout<S: Real>(t: &mut Tape<S>, x: Var, p: f64, rng: &mut Option<&mut StreamRng>) -> Result<Var> {
        match rng {
            Some(r) if p > 0.0 => t.dropout(x, p, &mut **r),
            _ => Ok(x),
        }
    }

    /// Raw pre-normalization scores `[B, H, N, N]`: softmax logits for the
    /// softmax kinds, match logits (`P = sigmoid`) for geometric attention.
    /// Masking is not applied here.
    pub fn scores<S: Real>(
        &self,
        t: &mut Tape<S>,
        p: &Bound,
        h: Var,
        mask: &AttentionMask,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (n, d, heads, dh) = (mask.len, cfg.d_model, cfg.n_heads, cfg.d_head());
        if t.shape(h) != [mask.rows(), d] {
            return Err(Error::shape("attention", t.shape(h), &[mask.rows(), d]));
        }
        let inv_sqrt = S::of(1.0 / (dh as f64).sqrt());
        let q = t.matmul(h, p[self.w_q])?;
        let k = t.matmul(h, p[self.w_k])?;
        let k = self.split_heads(t, k, mask)?;
        match &self.position {
            PositionParams::Absolute => {
                let q = Self::maybe_dropout(t, q, cfg.content_dropout, &mut rng)?;
                let q = self.split_heads(t, q, mask)?;
                let s = t.matmul_t(q, k, false, true)?;
                Ok(t.scale(s, inv_sqrt))
            }
            PositionParams::Relative { w_kp, b_qe, b_qp, gate } => {
                // (a)+(c): content query with its bias against content keys.
                let qe = t.add(q, p[*b_qe])?;
                let qe = Self::maybe_dropout(t, qe, cfg.content_dropout, &mut rng)?;
                let qe = self.split_heads(t, qe, mask)?;
                let content = t.matmul_t(qe, k, false, true)?;
                // (b)+(d) against (e): position query against offset keys.
                let qp = t.add(q, p[*b_qp])?;
                let qp = Self::maybe_dropout(t, qp, cfg.position_dropout, &mut rng)?;
                let qp = self.split_heads(t, qp, mask)?;
                let by_offset = self.position_scores(t, qp, relative::offset_table(n, d), p[*w_kp], mask)?;
                let index = relative::offset_index(n);
                let rel = t.gather_last(by_offset, &index, n, n)?;
                let pos = match gate {
                    None => rel,
                    Some((w_ar, b_ar)) => {
                        let abs = self.position_scores(t, qp, relative::absolute_table(n, d), p[*w_kp], mask)?;
                        let r = t.linear(h, p[*w_ar], Some(p[*b_ar]))?;
                        let r = t.sigmoid(r);
                        let r = t.reshape(r, &[mask.batch, 1, n, 1])?;
                        let one_minus = t.one_minus(r);
                        let a = t.mul(rel, r)?;
                        let b = t.mul(abs, one_minus)?;
                        t.add(a, b)?
                    }
                };
                let s = t.add(content, pos)?;
                Ok(t.scale(s, inv_sqrt))
            }
            PositionParams::Geometric {
                b_q,
                w_lr,
                b_lr,
                w_rl,
                b_rl,
                alpha,
                beta,
                gamma,
            } => {
                let q = t.add(q, p[*b_q])?;
                let q = Self::maybe_dropout(t, q, cfg.content_dropout, &mut rng)?;
                let q = self.split_heads(t, q, mask)?;
                let content = t.matmul_t(q, k, false, true)?;
                let per_head = |t: &mut Tape<S>, w: ParamId, b: ParamId| -> Result<Var> {
                    let x = t.linear(h, p[w], Some(p[b]))?;
                    let x = t.reshape(x, &[mask.batch, n, heads])?;
                    let x = t.permute(x, &[0, 2, 1])?;
                    t.reshape(x, &[mask.batch, heads, n, 1])
                };
                let lr = per_head(t, *w_lr, *b_lr)?;
                let rl = per_head(t, *w_rl, *b_rl)?;
                let upper = t.constant(Tensor::from_fn(&[n, n], |ij| if ij / n <= ij % n { S::one() } else { S::zero() }));
                let lower = t.one_minus(upper);
                let dl = t.mul(lr, upper)?;
                let dr = t.mul(rl, lower)?;
                let dir = t.add(dl, dr)?;
                let a = t.reshape(p[*alpha], &[heads, 1, 1])?;
                let b = t.reshape(p[*beta], &[heads, 1, 1])?;
                let g = t.reshape(p[*gamma], &[heads, 1, 1])?;
                let z = t.mul(content, a)?;
                let bd = t.mul(dir, b)?;
                let z = t.add(z, bd)?;
                t.add(z, g)
            }
        }
    }

    /// Turns raw scores into attention weights under `mask`.
    pub fn normalize<S: Real>(&self, t: &mut Tape<S>, scores: Var, mask: &AttentionMask) -> Result<Var> {
        mask.check_nonempty()?;
        let (b, n) = (mask.batch, mask.len);
        if self.config.kind == AttentionKind::Geometric {
            return geometric_from_logits(t, scores, &mask.valid, b, n);
        }
        let heads = self.config.n_heads;
        let mut hidden = Vec::with_capacity(b * heads * n * n);
        for bi in 0..b {
            let row = &mask.valid[bi * n..(bi + 1) * n];
            for _ in 0..heads * n {
                hidden.extend(row.iter().map(|&v| !v));
            }
        }
        let masked = t.masked_fill(scores, &hidden, S::neg_infinity())?;
        t.softmax(masked)
    }

    /// Full attention: scores, normalization, weighted values, output
    /// projection. `rng` enables query dropout (training mode).
    pub fn forward<S: Real>(
        &self,
        t: &mut Tape<S>,
        p: &Bound,
        h: Var,
        mask: &AttentionMask,
        rng: Option<&mut StreamRng>,
    ) -> Result<AttentionOutput> {
        let scores = self.scores(t, p, h, mask, rng)?;
        let weights = self.normalize(t, scores, mask)?;
        let v = t.matmul(h, p[self.w_v])?;
        let v = self.split_heads(t, v, mask)?;
        let mixed = t.matmul(weights, v)?;
        let merged = self.merge_heads(t, mixed, mask)?;
        let out = t.linear(merged, p[self.w_o], Some(p[self.b_o]))?;
        Ok(AttentionOutput { out, weights })
    }
}
