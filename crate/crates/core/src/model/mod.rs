//! Encoder model: embeddings, a shared layer applied for a number of steps,
//! optional ACT, and the classification readout.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{relative, AttentionKind, AttentionMask};
use crate::error::{Error, Result};
use crate::layer::{act_halting, ActConfig, ActOutput, ActParams, ActState, ActVariant, GatedLayerParams, LayerConfig, LayerVariant};
use crate::rng::StreamRng;
use crate::substrate::{Bound, Init, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::tasks::{Sample, BEGIN_ID, END_ID, PAD_ID};

/// Which column the classifier reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// The `E` column.
    Last,
    /// The `B` column.
    First,
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Readout::Last => "last",
            Readout::First => "first",
        })
    }
}

impl FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Readout::Last),
            "first" => Ok(Readout::First),
            _ => Err(Error::Config(format!("unknown readout `{s}` (expected last or first)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_classes: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// Steps during training.
    pub n_layers: usize,
    /// Steps during evaluation.
    pub test_steps: usize,
    pub variant: LayerVariant,
    pub readout: Readout,
    /// ACT variant; `t_max` is taken from the step count of each call.
    pub act: Option<ActVariant>,
    pub act_epsilon: f64,
    pub act_weight: f64,
    pub dropout: f64,
    pub attention_dropout: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, n_classes: usize, variant: LayerVariant) -> Self {
        Self {
            vocab_size,
            n_classes,
            d_model: 128,
            d_ff: 256,
            n_heads: 4,
            n_layers: 6,
            test_steps: 6,
            variant,
            readout: Readout::Last,
            act: None,
            act_epsilon: crate::layer::act::DEFAULT_EPSILON,
            act_weight: crate::layer::act::DEFAULT_REG_WEIGHT,
            dropout: 0.0,
            attention_dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.test_steps < self.n_layers {
            return Err(Error::Config(format!("test_steps {} must be at least n_layers {}", self.test_steps, self.n_layers)));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be positive".into()));
        }
        if self.vocab_size < 3 || self.n_classes == 0 {
            return Err(Error::Config("vocabulary and class count must be non-empty".into()));
        }
        self.layer().attention().validate()?;
        if let Some(v) = self.act {
            self.act_config(v, self.n_layers).validate()?;
        }
        Ok(())
    }

    pub fn layer(&self) -> LayerConfig {
        LayerConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            variant: self.variant,
            dropout: self.dropout,
            attention_dropout: self.attention_dropout,
        }
    }

    pub fn act_config(&self, variant: ActVariant, t_max: usize) -> ActConfig {
        ActConfig {
            variant,
            t_max,
            epsilon: self.act_epsilon,
            reg_weight: self.act_weight,
        }
    }

    /// Flat `key=value` form used in checkpoint headers.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("vocab_size", self.vocab_size.to_string());
        put("n_classes", self.n_classes.to_string());
        put("d_model", self.d_model.to_string());
        put("d_ff", self.d_ff.to_string());
        put("n_heads", self.n_heads.to_string());
        put("n_layers", self.n_layers.to_string());
        put("test_steps", self.test_steps.to_string());
        put("variant", self.variant.to_string());
        put("readout", self.readout.to_string());
        put("act", self.act.map_or("none".to_string(), |v| v.to_string()));
        put("act_epsilon", self.act_epsilon.to_string());
        put("act_weight", self.act_weight.to_string());
        put("dropout", self.dropout.to_string());
        put("attention_dropout", self.attention_dropout.to_string());
        m
    }

    pub fn from_pairs(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
            let v = m.get(k).ok_or_else(|| Error::Checkpoint(format!("missing model key `{k}`")))?;
            v.parse().map_err(|_| Error::Checkpoint(format!("bad value `{v}` for `{k}`")))
        }
        let act: String = get(m, "act")?;
        Ok(Self {
            vocab_size: get(m, "vocab_size")?,
            n_classes: get(m, "n_classes")?,
            d_model: get(m, "d_model")?,
            d_ff: get(m, "d_ff")?,
            n_heads: get(m, "n_heads")?,
            n_layers: get(m, "n_layers")?,
            test_steps: get(m, "test_steps")?,
            variant: m.get("variant").ok_or_else(|| Error::Checkpoint("missing model key `variant`".into()))?.parse()?,
            readout: m.get("readout").ok_or_else(|| Error::Checkpoint("missing model key `readout`".into()))?.parse()?,
            act: if act == "none" { None } else { Some(act.parse()?) },
            act_epsilon: get(m, "act_epsilon")?,
            act_weight: get(m, "act_weight")?,
            dropout: get(m, "dropout")?,
            attention_dropout: get(m, "attention_dropout")?,
        })
    }
}

/// Suggested number of steps: `max_graph_depth * steps_per_op + extra`.
pub fn depth_heuristic(max_graph_depth: usize, steps_per_op: usize, extra: usize) -> usize {
    max_graph_depth * steps_per_op.max(1) + extra
}

/// A padded batch of `B <tokens> E` sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[batch * len]` token ids, pad id 0.
    pub ids: Vec<u8>,
    pub lengths: Vec<usize>,
    pub mask: AttentionMask,
    /// Flat row of the readout column of every sequence.
    pub readout_rows: Vec<usize>,
}

impl Batch {
    /// Wraps each token sequence with `B`/`E` and pads to a common length.
    pub fn new(seqs: &[&[u8]], readout: Readout) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if let Some(i) = seqs.iter().position(|s| s.is_empty()) {
            return Err(Error::Config(format!("sequence {i} of the batch is empty")));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len() + 2).collect();
        let len = *lengths.iter().max().unwrap();
        let mut ids = vec![PAD_ID; seqs.len() * len];
        let mut readout_rows = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            let row = &mut ids[b * len..(b + 1) * len];
            row[0] = BEGIN_ID;
            row[1..=s.len()].copy_from_slice(s);
            row[s.len() + 1] = END_ID;
            readout_rows.push(match readout {
                Readout::Last => b * len + s.len() + 1,
                Readout::First => b * len,
            });
        }
        Ok(Self {
            ids,
            mask: AttentionMask::from_lengths(&lengths, len),
            lengths,
            readout_rows,
        })
    }

    pub fn from_samples(samples: &[&Sample], readout: Readout) -> Result<Self> {
        let seqs: Vec<&[u8]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
        Self::new(&seqs, readout)
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn len(&self) -> usize {
        self.mask.len
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

/// Values captured at one step when tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCapture {
    /// `[batch, heads, len, len]`
    pub attention: Vec<f32>,
    /// `[batch * len, d]` for gated variants.
    pub gate: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, classes]`
    pub logits: Var,
    pub act: Option<ActOutput>,
    pub steps_run: usize,
    pub captures: Vec<StepCapture>,
}

/// Parameter handles of the encoder. Values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub embedding: ParamId,
    pub layer: GatedLayerParams,
    pub act: Option<ActParams>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl EncoderModel {
    pub fn new<S: Real>(config: ModelConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let emb_init = if config.variant.attention == AttentionKind::StandardAbs {
            Init::Uniform((3.0 / d as f64).sqrt())
        } else {
            Init::Unit
        };
        let embedding = store.add("embedding", &[config.vocab_size, d], emb_init, false, rng)?;
        let layer = GatedLayerParams::new(store, "layer", config.layer(), rng)?;
        let act = match config.act {
            Some(_) => Some(ActParams::new(store, "act", d, rng)?),
            None => None,
        };
        let out_w = store.add("out.w", &[d, config.n_classes], Init::FanIn, true, rng)?;
        let out_b = store.add("out.b", &[config.n_classes], Init::Const(0.0), false, rng)?;
        Ok(Self {
            config,
            embedding,
            layer,
            act,
            out_w,
            out_b,
        })
    }

    /// Initial column states `[batch * len, d]`.
    pub fn embed<S: Real>(&self, t: &mut Tape<S>, p: &Bound, batch: &Batch) -> Result<Var> {
        if let Some(&bad) = batch.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        let idx: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let e = t.gather_rows(p[self.embedding], &idx)?;
        if self.config.variant.attention != AttentionKind::StandardAbs {
            return Ok(e);
        }
        let d = self.config.d_model;
        let n = batch.len();
        let table = relative::absolute_table::<S>(n, d);
        let pos = Tensor::from_fn(&[batch.ids.len(), d], |k| table.data()[((k / d) % n) * d + k % d]);
        let scaled = t.scale(e, S::of((d as f64).sqrt()));
        let pos = t.constant(pos);
        t.add(scaled, pos)
    }

    /// Runs `steps` shared steps (or ACT with `t_max = steps`). `rng`
    /// enables dropout; `trace` copies attention and gate values per step.
    pub fn forward<S: Real>(
        &self,
        t: &mut Tape<S>,
        p: &Bound,
        batch: &Batch,
        steps: usize,
        mut rng: Option<&mut StreamRng>,
        trace: bool,
    ) -> Result<ForwardOutput> {
        if steps == 0 {
            return Err(Error::Config("at least one step is required".into()));
        }
        let mut h = self.embed(t, p, batch)?;
        let mut act = match (self.config.act, &self.act) {
            (Some(v), Some(_)) => Some(ActState::new(self.config.act_config(v, steps), &batch.mask, self.config.d_model)?),
            _ => None,
        };
        let mut captures = Vec::new();
        let mut steps_run = 0;
        for _ in 0..steps {
            let o = self.layer.step(t, p, h, &batch.mask, rng.as_deref_mut())?;
            h = o.out;
            steps_run += 1;
            if trace {
                captures.push(StepCapture {
                    attention: t.value(o.attention).iter().map(|x| x.f64() as f32).collect(),
                    gate: o.gate.map(|g| t.value(g).iter().map(|x| x.f64() as f32).collect()),
                });
            }
            if let (Some(state), Some(ap)) = (act.as_mut(), self.act.as_ref()) {
                let p_hat = act_halting(t, p, ap, h)?;
                state.update(t, h, p_hat)?;
                if state.finished() {
                    break;
                }
            }
        }
        let (final_state, act_out) = match act {
            Some(state) => {
                let o = state.finish(t)?;
                (o.out, Some(o))
            }
            None => (h, None),
        };
        let read = t.gather_rows(final_state, &batch.readout_rows)?;
        let logits = t.linear(read, p[self.out_w], Some(p[self.out_b]))?;
        Ok(ForwardOutput {
            logits,
            act: act_out,
            steps_run,
            captures,
        })
    }

    /// Mean cross-entropy plus the ACT regularizer when present.
    pub fn loss<S: Real>(&self, t: &mut Tape<S>, out: &ForwardOutput, targets: &[usize]) -> Result<Var> {
        if let Some(&bad) = targets.iter().find(|&&c| c >= self.config.n_classes) {
            return Err(Error::TargetOutOfRange {
                target: bad,
                classes: self.config.n_classes,
            });
        }
        let ce = t.cross_entropy(out.logits, targets)?;
        match &out.act {
            Some(a) => t.add(ce, a.loss),
            None => Ok(ce),
        }
    }
}

/// Row-wise argmax of `[rows, classes]` values.
pub fn argmax_rows<S: Real>(values: &[S], classes: usize) -> Vec<usize> {
    values
        .chunks(classes)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests;
