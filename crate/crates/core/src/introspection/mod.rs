//! Per-example attention, gate and ponder traces, and their export.

pub mod pgm;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Batch, EncoderModel};
use crate::par;
use crate::substrate::{ParamStore, Tape};
use crate::tasks::{Sample, Vocab};

/// Attention weights `[step][head][target][source]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub steps: usize,
    pub heads: usize,
    pub len: usize,
    pub weights: Vec<f32>,
}

impl AttentionTrace {
    pub fn map(&self, step: usize, head: usize) -> &[f32] {
        let nn = self.len * self.len;
        let at = (step * self.heads + head) * nn;
        &self.weights[at..at + nn]
    }

    /// Element-wise maximum over heads.
    pub fn head_max(&self, step: usize) -> Vec<f32> {
        let mut out = self.map(step, 0).to_vec();
        for h in 1..self.heads {
            for (o, &v) in out.iter_mut().zip(self.map(step, h)) {
                *o = o.max(v);
            }
        }
        out
    }
}

/// Gate activity per step and column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub steps: usize,
    pub len: usize,
    pub d: usize,
    /// Channel mean `[step][column]`.
    pub mean: Vec<f32>,
    /// Full gate vectors `[step][column][channel]`.
    pub full: Vec<f32>,
}

impl GateTrace {
    /// First step (0-based) at which each column's cumulative mean gate
    /// activity exceeds `threshold`.
    pub fn frontier(&self, threshold: f32) -> Vec<Option<usize>> {
        (0..self.len)
            .map(|c| {
                let mut acc = 0.0;
                (0..self.steps).find(|&s| {
                    acc += self.mean[s * self.len + c];
                    acc > threshold
                })
            })
            .collect()
    }
}

/// ACT readout steps per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PonderStats {
    pub ponder: Vec<usize>,
    pub halted: Vec<bool>,
    pub t_max: usize,
}

impl PonderStats {
    pub fn mean(&self) -> f64 {
        self.ponder.iter().sum::<usize>() as f64 / self.ponder.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// Columns including `B` and `E`.
    pub tokens: Vec<String>,
    pub attention_kind: AttentionKind,
    pub attention: AttentionTrace,
    pub gates: Option<GateTrace>,
    pub ponder: Option<PonderStats>,
    pub logits: Vec<f32>,
    pub prediction: String,
}

/// Runs one example with tracing on. `batch` must hold a single sequence.
pub fn capture(model: &EncoderModel, store: &ParamStore<f32>, vocab: &Vocab, batch: &Batch, steps: usize) -> Result<Trace> {
    if batch.size() != 1 {
        return Err(Error::Config(format!("traces are per example; got a batch of {}", batch.size())));
    }
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let out = model.forward(&mut t, &p, batch, steps, None, true)?;
    let logits = t.value(out.logits).to_vec();
    let n = batch.len();
    let d = model.config.d_model;
    let heads = model.config.n_heads;
    let ran = out.captures.len();
    let attention = AttentionTrace {
        steps: ran,
        heads,
        len: n,
        weights: out.captures.iter().flat_map(|c| c.attention.iter().copied()).collect(),
    };
    let gates = if out.captures.iter().all(|c| c.gate.is_some()) && ran > 0 {
        let full: Vec<f32> = out.captures.iter().flat_map(|c| c.gate.as_ref().unwrap().iter().copied()).collect();
        let mean = full.chunks(d).map(|g| g.iter().sum::<f32>() / d as f32).collect();
        Some(GateTrace { steps: ran, len: n, d, mean, full })
    } else {
        None
    };
    let ponder = out.act.as_ref().map(|a| PonderStats {
        ponder: a.ponder.clone(),
        halted: a.halted.clone(),
        t_max: steps,
    });
    let pred = argmax_rows(&logits, model.config.n_classes)[0];
    Ok(Trace {
        tokens: batch.ids.iter().map(|&i| vocab.token(i).to_string()).collect(),
        attention_kind: model.config.variant.attention,
        attention,
        gates,
        ponder,
        logits,
        prediction: vocab.classes[pred].clone(),
    })
}

/// [`capture`] for whitespace-separated input tokens.
pub fn capture_text(model: &EncoderModel, store: &ParamStore<f32>, vocab: &Vocab, input: &str, steps: usize) -> Result<Trace> {
    let toks: Vec<&str> = input.split_whitespace().collect();
    let ids = vocab.encode(&toks)?;
    let batch = Batch::new(&[&ids], model.config.readout)?;
    capture(model, store, vocab, &batch, steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub head: Option<usize>,
    pub width: usize,
    pub height: usize,
}

/// Writes `trace.json`, one heatmap per step and head, a head-max heatmap
/// per step, `gates.pgm` (steps × columns) and `index.json`. Steps are
/// numbered from 1 in file names.
pub fn export(trace: &Trace, dir: &Path) -> Result<Vec<Artifact>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    let a = &trace.attention;
    let n = a.len;
    let mut index = vec![Artifact {
        file: "trace.json".into(),
        kind: "trace".into(),
        step: None,
        head: None,
        width: 0,
        height: 0,
    }];
    write("trace.json", serde_json::to_string(trace)?.as_bytes())?;
    for s in 0..a.steps {
        for h in 0..a.heads {
            let file = format!("att_t{}_h{}.pgm", s + 1, h);
            write(&file, &pgm::encode(n, n, a.map(s, h)))?;
            index.push(Artifact {
                file,
                kind: "attention".into(),
                step: Some(s + 1),
                head: Some(h),
                width: n,
                height: n,
            });
        }
        let file = format!("att_t{}_max.pgm", s + 1);
        write(&file, &pgm::encode(n, n, &a.head_max(s)))?;
        index.push(Artifact {
            file,
            kind: "attention_max".into(),
            step: Some(s + 1),
            head: None,
            width: n,
            height: n,
        });
    }
    if let Some(g) = &trace.gates {
        write("gates.pgm", &pgm::encode(g.len, g.steps, &g.mean))?;
        index.push(Artifact {
            file: "gates.pgm".into(),
            kind: "gates".into(),
            step: None,
            head: None,
            width: g.len,
            height: g.steps,
        });
    }
    write("index.json", serde_json::to_string_pretty(&index)?.as_bytes())?;
    Ok(index)
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Mean and spread of ACT readout steps over the valid columns of all
/// sequences of one length (tokens excluding `B`/`E`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PonderRow {
    pub length: usize,
    pub sequences: usize,
    pub mean: f64,
    pub std: f64,
    pub max: usize,
}

pub fn ponder_report(model: &EncoderModel, store: &ParamStore<f32>, samples: &[Sample], steps: usize, batch_size: usize) -> Result<Vec<PonderRow>> {
    if model.config.act.is_none() {
        return Err(Error::Unsupported("ponder report needs a model trained with ACT".into()));
    }
    let chunks: Vec<&[Sample]> = samples.chunks(batch_size.max(1)).collect();
    let per_chunk = par::map_slice(&chunks, |chunk| -> Result<Vec<(usize, Vec<usize>)>> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, model.config.readout)?;
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let out = model.forward(&mut t, &p, &batch, steps, None, false)?;
        let act = out.act.ok_or_else(|| Error::Unsupported("forward returned no ACT output".into()))?;
        let n = batch.len();
        Ok(chunk
            .iter()
            .enumerate()
            .map(|(b, s)| (s.tokens.len(), act.ponder[b * n..b * n + s.tokens.len() + 2].to_vec()))
            .collect())
    });
    let mut by_len: std::collections::BTreeMap<usize, (usize, Vec<usize>)> = Default::default();
    for chunk in per_chunk {
        for (len, cols) in chunk? {
            let e = by_len.entry(len).or_default();
            e.0 += 1;
            e.1.extend(cols);
        }
    }
    Ok(by_len
        .into_iter()
        .map(|(length, (sequences, cols))| {
            let k = cols.len() as f64;
            let mean = cols.iter().sum::<usize>() as f64 / k;
            let var = cols.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / k;
            PonderRow {
                length,
                sequences,
                mean,
                std: var.sqrt(),
                max: cols.iter().copied().max().unwrap_or(0),
            }
        })
        .collect())
}

/// Soft diagnostic: whether the gate frontier is non-decreasing over the
/// columns that ever open.
pub fn frontier_is_monotone(gates: &GateTrace, threshold: f32) -> bool {
    let f: Vec<usize> = gates.frontier(threshold).into_iter().flatten().collect();
    f.windows(2).all(|w| w[0] <= w[1])
}

/// Paths of the files listed in an index.
pub fn artifact_paths(dir: &Path, index: &[Artifact]) -> Vec<PathBuf> {
    index.iter().map(|a| dir.join(&a.file)).collect()
}

#[cfg(test)]
mod tests;
