//! Flat `key=value` run configuration with per-task, per-variant defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::layer::LayerVariant;
use crate::model::ModelConfig;
use crate::tasks::{SplitName, SplitPlan, Task};

/// Values tried for the ACT regularizer weight.
pub const ACT_WEIGHT_AXIS: [f64; 5] = [0.001, 0.003, 0.01, 0.03, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub n_iters: usize,
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub data_seed: u64,
    /// Pre-generated dataset; generated in memory from `data_seed` when absent.
    pub data_dir: Option<PathBuf>,
    pub plan: SplitPlan,
    /// Split whose accuracy selects the best checkpoint.
    pub select_split: SplitName,
    /// Stop once IID validation accuracy reaches this value.
    pub early_stop: Option<f64>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Worker threads; 0 keeps the default pool.
    pub threads: usize,
}

struct Preset {
    d_model: usize,
    d_ff: usize,
    n_heads: usize,
    n_layers: usize,
    test_steps: usize,
    batch: usize,
    lr: f64,
    wd: f64,
    dropout: f64,
    attention_dropout: f64,
    iters: usize,
}

fn preset(task: Task, v: LayerVariant) -> Preset {
    let geometric = v.attention == AttentionKind::Geometric;
    let p = |d_model, d_ff, n_heads, n_layers, lr, wd, dropout, iters| Preset {
        d_model,
        d_ff,
        n_heads,
        n_layers,
        test_steps: n_layers,
        batch: 512,
        lr,
        wd,
        dropout,
        attention_dropout: 0.1,
        iters,
    };
    match (task, v.gated) {
        (Task::Ctl | Task::CtlBackward, false) => p(128, 256, 4, 11, 1.5e-4, 0.0025, 0.1, 30_000),
        (Task::Ctl | Task::CtlBackward, true) if geometric => p(256, 512, 1, 14, 1.5e-4, 0.01, 0.5, 30_000),
        (Task::Ctl | Task::CtlBackward, true) => p(256, 512, 1, 14, 2e-4, 0.01, 0.5, 30_000),
        (Task::Arith, false) => p(128, 256, 4, 11, 1.5e-4, 0.0025, 0.5, 200_000),
        (Task::Arith, true) => p(256, 1024, 4, 15, 1.5e-4, 0.01, 0.5, 100_000),
        (Task::Listops, false) => Preset {
            attention_dropout: 0.05,
            ..p(256, 1024, 16, 6, 4e-4, 0.05, 0.015, 200_000)
        },
        (Task::Listops, true) => Preset {
            test_steps: 24,
            ..p(512, 1024, 16, 20, 2e-4, 0.09, 0.1, 100_000)
        },
    }
}

pub fn default_grad_clip(task: Task) -> f64 {
    if task.is_ctl() {
        5.0
    } else {
        1.0
    }
}

/// `"1-5"`, `"6,7,8"` or `"6"`.
pub fn parse_depths(s: &str) -> Result<Vec<u32>> {
    let bad = || Error::Config(format!("bad depth list `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u32, u32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn format_depths(d: &[u32]) -> String {
    let contiguous = d.windows(2).all(|w| w[1] == w[0] + 1);
    match (d.first(), d.last()) {
        (Some(a), Some(b)) if contiguous && a != b => format!("{a}-{b}"),
        _ => d.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    match v.trim() {
        "" | "none" => Ok(None),
        s => parse(key, s).map(Some),
    }
}

impl RunConfig {
    /// Defaults for `task` and `variant`.
    pub fn preset(task: Task, variant: LayerVariant) -> Self {
        let p = preset(task, variant);
        let vocab = task.vocab();
        let mut model = ModelConfig::new(vocab.len(), vocab.n_classes(), variant);
        model.d_model = p.d_model;
        model.d_ff = p.d_ff;
        model.n_heads = p.n_heads;
        model.n_layers = p.n_layers;
        model.test_steps = p.test_steps;
        model.dropout = p.dropout;
        model.attention_dropout = p.attention_dropout;
        Self {
            task,
            model,
            batch_size: p.batch,
            lr: p.lr,
            weight_decay: p.wd,
            grad_clip: default_grad_clip(task),
            n_iters: p.iters,
            eval_every: 1000,
            eval_batch_size: 256,
            seed: 0,
            data_seed: 0,
            data_dir: None,
            plan: task.default_plan(),
            select_split: SplitName::ValidOod,
            early_stop: None,
            resume: None,
            threads: 0,
        }
    }

    /// Builds a config from `key=value` pairs: `task` and `variant` pick the
    /// defaults, every other key overrides one field.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let last = |k: &str| pairs.iter().rev().find(|(key, _)| *key == k).map(|(_, v)| v.trim());
        let task: Task = last("task").unwrap_or("ctl").parse()?;
        let variant: LayerVariant = last("variant").unwrap_or("ndr").parse()?;
        let mut c = Self::preset(task, variant);
        let extra_steps = c.model.test_steps - c.model.n_layers;
        for &(k, v) in &pairs {
            c.set(k, v)?;
        }
        // Unless given, evaluation runs the preset's extra steps on top.
        if last("test_steps").is_none() {
            c.model.test_steps = c.model.n_layers + extra_steps;
        }
        if last("data_seed").is_none() {
            c.data_seed = c.seed;
        }
        c.validate()?;
        Ok(c)
    }

    /// Parses a config file body: one `key=value` per line, `#` comments.
    pub fn parse_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, found `{line}`", i + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        pairs.extend(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        Self::from_pairs(pairs)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "task" | "variant" => {}
            "d_model" => m.d_model = parse(key, v)?,
            "d_ff" => m.d_ff = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "n_layers" => m.n_layers = parse(key, v)?,
            "test_steps" => m.test_steps = parse(key, v)?,
            "readout" => m.readout = parse(key, v)?,
            "act" => m.act = optional(key, v)?,
            "act_epsilon" => m.act_epsilon = parse(key, v)?,
            "act_weight" => m.act_weight = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "attention_dropout" => m.attention_dropout = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "n_iters" => self.n_iters = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "data_dir" => self.data_dir = optional(key, v)?,
            "select_split" => self.select_split = parse(key, v)?,
            "early_stop" => self.early_stop = optional(key, v)?,
            "resume" => self.resume = optional(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            _ => {
                let split = SplitName::ALL.into_iter().find(|n| key == format!("{n}_depths") || key == format!("{n}_size"));
                let Some(split) = split else {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                };
                let spec = self.plan.get_mut(split);
                if key.ends_with("_depths") {
                    spec.depths = parse_depths(v)?;
                } else {
                    spec.size = parse(key, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("eval_batch_size", self.eval_batch_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative, grad_clip positive".into()));
        }
        for (k, p) in [("dropout", self.model.dropout), ("attention_dropout", self.model.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{k} must be in [0, 1)")));
            }
        }
        let vocab = self.task.vocab();
        if self.model.vocab_size != vocab.len() || self.model.n_classes != vocab.n_classes() {
            return Err(Error::VocabMismatch(format!("model sized for {}/{} but task {} has {}/{}", self.model.vocab_size, self.model.n_classes, self.task, vocab.len(), vocab.n_classes())));
        }
        Ok(())
    }

    /// Every field as `key=value` pairs, readable by [`RunConfig::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        let fixed: Vec<(&str, String)> = vec![
            ("task", self.task.to_string()),
            ("variant", m.variant.to_string()),
            ("d_model", m.d_model.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("test_steps", m.test_steps.to_string()),
            ("readout", m.readout.to_string()),
            ("act", opt(m.act.map(|a| a.to_string()))),
            ("act_epsilon", m.act_epsilon.to_string()),
            ("act_weight", m.act_weight.to_string()),
            ("dropout", m.dropout.to_string()),
            ("attention_dropout", m.attention_dropout.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("n_iters", self.n_iters.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("data_dir", opt(self.data_dir.as_ref().map(|p| p.display().to_string()))),
            ("select_split", self.select_split.to_string()),
            ("early_stop", opt(self.early_stop.map(|x| x.to_string()))),
            ("resume", opt(self.resume.as_ref().map(|p| p.display().to_string()))),
            ("threads", self.threads.to_string()),
        ];
        let mut v: Vec<(String, String)> = fixed.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        for n in SplitName::ALL {
            let s = self.plan.get(n);
            v.push((format!("{n}_depths"), format_depths(&s.depths)));
            v.push((format!("{n}_size"), s.size.to_string()));
        }
        v
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// The pairs as a map, as stored in checkpoint metadata.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.to_pairs().into_iter().collect()
    }
}
