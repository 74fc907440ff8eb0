//! Dataset generators, evaluators and depth-disjoint splits for the three
//! algorithmic tasks.

pub mod arith;
pub mod ctl;
pub mod listops;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::Streams;

pub use ctl::CtlSpec;

pub const PAD: &str = "<pad>";
pub const BEGIN: &str = "B";
pub const END: &str = "E";
pub const PAD_ID: u8 = 0;
pub const BEGIN_ID: u8 = 1;
pub const END_ID: u8 = 2;

/// Token bound for arithmetic and ListOps, before B/E.
pub const MAX_TOKENS: usize = 50;

/// Samples generated per PRNG stream.
const SHARD: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ctl,
    CtlBackward,
    Arith,
    Listops,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Ctl, Task::CtlBackward, Task::Arith, Task::Listops];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ctl => "ctl",
            Task::CtlBackward => "ctl_backward",
            Task::Arith => "arith",
            Task::Listops => "listops",
        }
    }

    pub fn is_ctl(self) -> bool {
        matches!(self, Task::Ctl | Task::CtlBackward)
    }

    pub fn vocab(self) -> Vocab {
        let digits = || (0..10).map(|d| d.to_string());
        let (tokens, classes): (Vec<String>, Vec<String>) = match self {
            Task::Ctl | Task::CtlBackward => (
                (0..ctl::N_SYMBOLS).map(ctl::symbol_name).chain((0..ctl::N_FUNCTIONS).map(ctl::function_name)).collect(),
                (0..ctl::N_SYMBOLS).map(ctl::symbol_name).collect(),
            ),
            Task::Arith => (digits().chain(["(", ")", "+", "*"].map(String::from)).collect(), digits().collect()),
            Task::Listops => (
                digits()
                    .chain(["[", "]"].map(String::from))
                    .chain(listops::ListOp::ALL.iter().map(|o| o.as_str().to_string()))
                    .collect(),
                digits().collect(),
            ),
        };
        Vocab::new(tokens, classes)
    }

    pub fn max_tokens(self) -> usize {
        match self {
            Task::Ctl | Task::CtlBackward => 11,
            Task::Arith | Task::Listops => MAX_TOKENS,
        }
    }

    /// Default split plan with the full dataset sizes.
    pub fn default_plan(self) -> SplitPlan {
        match self {
            Task::Ctl | Task::CtlBackward => SplitPlan {
                train: SplitSpec::new(1..=5, 53_704),
                valid_iid: SplitSpec::new(1..=5, 1_000),
                valid_ood: SplitSpec::new(6..=8, 1_000),
                test: SplitSpec::new(9..=10, 1_000),
            },
            Task::Arith => SplitPlan {
                train: SplitSpec::new(0..=5, 100_000),
                valid_iid: SplitSpec::new(0..=5, 1_000),
                valid_ood: SplitSpec::new(6..=6, 1_000),
                test: SplitSpec::new(7..=8, 1_000),
            },
            Task::Listops => SplitPlan {
                train: SplitSpec::new(0..=5, 1_000_000),
                valid_iid: SplitSpec::new(0..=5, 1_000),
                valid_ood: SplitSpec::new(6..=6, 1_000),
                test: SplitSpec::new(7..=8, 1_000),
            },
        }
    }

    /// Evaluates token strings (without B/E) with the task's interpreter.
    pub fn evaluate(self, tokens: &[&str], spec: Option<&CtlSpec>) -> Result<usize> {
        match self {
            Task::Ctl | Task::CtlBackward => {
                let spec = spec.ok_or_else(|| Error::Config("CTL evaluation needs function tables".into()))?;
                ctl::ctl_eval_tokens(tokens, self == Task::CtlBackward, spec)
            }
            Task::Arith => Ok(arith::arith_eval(tokens)? as usize),
            Task::Listops => Ok(listops::parse(tokens)?.eval()? as usize),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = match s {
            "ctl_fwd" => "ctl",
            "ctl_bwd" => "ctl_backward",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (expected ctl, ctl_backward, arith or listops)")))
    }
}

/// Token vocabulary: `<pad>`, `B`, `E`, then the task tokens. Output
/// classes are indexed separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
    pub classes: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u8>,
    #[serde(skip)]
    class_index: HashMap<String, u8>,
}

impl Vocab {
    pub fn new(task_tokens: Vec<String>, classes: Vec<String>) -> Self {
        let tokens: Vec<String> = [PAD, BEGIN, END].iter().map(|s| s.to_string()).chain(task_tokens).collect();
        let mut v = Self {
            tokens,
            classes,
            index: HashMap::new(),
            class_index: HashMap::new(),
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u8)).collect();
        self.class_index = self.classes.iter().enumerate().map(|(i, t)| (t.clone(), i as u8)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn id(&self, tok: &str) -> Result<u8> {
        self.index.get(tok).copied().ok_or_else(|| Error::UnknownToken(tok.to_string()))
    }

    pub fn class_id(&self, tok: &str) -> Result<u8> {
        self.class_index.get(tok).copied().ok_or_else(|| Error::UnknownToken(tok.to_string()))
    }

    pub fn encode(&self, toks: &[impl AsRef<str>]) -> Result<Vec<u8>> {
        toks.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: u8) -> &str {
        &self.tokens[id as usize]
    }

    pub fn decode(&self, ids: &[u8]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Serialized form used in checkpoints and manifests.
    pub fn describe(&self) -> String {
        format!("{}|{}", self.tokens.join(" "), self.classes.join(" "))
    }

    pub fn from_description(s: &str) -> Result<Self> {
        let (t, c) = s.split_once('|').ok_or_else(|| Error::Parse("vocabulary description lacks `|`".into()))?;
        let mut v = Self {
            tokens: t.split(' ').map(String::from).collect(),
            classes: c.split(' ').map(String::from).collect(),
            index: HashMap::new(),
            class_index: HashMap::new(),
        };
        if v.tokens.get(..3) != Some(&[PAD.to_string(), BEGIN.to_string(), END.to_string()][..]) {
            return Err(Error::Parse("vocabulary must start with <pad> B E".into()));
        }
        v.reindex();
        Ok(v)
    }
}

/// One problem: task token ids (without B/E), target class, depth.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sample {
    pub tokens: Vec<u8>,
    pub target: u8,
    pub depth: u32,
    pub dep_depth: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonSample {
    pub tokens: Vec<String>,
    pub target: String,
    pub depth: u32,
    pub dep_depth: Option<u32>,
}

impl Sample {
    pub fn to_json(&self, vocab: &Vocab) -> JsonSample {
        JsonSample {
            tokens: vocab.decode(&self.tokens).into_iter().map(String::from).collect(),
            target: vocab.classes[self.target as usize].clone(),
            depth: self.depth,
            dep_depth: self.dep_depth,
        }
    }

    pub fn from_json(j: &JsonSample, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            tokens: vocab.encode(&j.tokens)?,
            target: vocab.class_id(&j.target)?,
            depth: j.depth,
            dep_depth: j.dep_depth,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    ValidIid,
    ValidOod,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [SplitName::Train, SplitName::ValidIid, SplitName::ValidOod, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::ValidIid => "valid_iid",
            SplitName::ValidOod => "valid_ood",
            SplitName::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (expected train, valid_iid, valid_ood or test)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub depths: Vec<u32>,
    pub size: usize,
}

impl SplitSpec {
    pub fn new(depths: std::ops::RangeInclusive<u32>, size: usize) -> Self {
        Self {
            depths: depths.collect(),
            size,
        }
    }

    /// Samples per depth: equal shares, the remainder going to the
    /// shallowest depths.
    pub fn quotas(&self) -> Vec<(u32, usize)> {
        let k = self.depths.len().max(1);
        self.depths
            .iter()
            .enumerate()
            .map(|(i, &d)| (d, self.size / k + usize::from(i < self.size % k)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: SplitSpec,
    pub valid_iid: SplitSpec,
    pub valid_ood: SplitSpec,
    pub test: SplitSpec,
}

impl SplitPlan {
    pub fn get(&self, name: SplitName) -> &SplitSpec {
        match name {
            SplitName::Train => &self.train,
            SplitName::ValidIid => &self.valid_iid,
            SplitName::ValidOod => &self.valid_ood,
            SplitName::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, name: SplitName) -> &mut SplitSpec {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::ValidIid => &mut self.valid_iid,
            SplitName::ValidOod => &mut self.valid_ood,
            SplitName::Test => &mut self.test,
        }
    }

    /// Same depths with every size divided by `factor` (at least one
    /// sample per depth).
    pub fn scaled_down(&self, factor: usize) -> Self {
        let mut p = self.clone();
        for n in SplitName::ALL {
            let s = p.get_mut(n);
            s.size = (s.size / factor.max(1)).max(s.depths.len());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let max = |s: &SplitSpec| s.depths.iter().max().copied();
        let min = |s: &SplitSpec| s.depths.iter().min().copied();
        for n in SplitName::ALL {
            if self.get(n).depths.is_empty() {
                return Err(Error::Config(format!("split {n} has no depths")));
            }
        }
        if !(max(&self.train) < min(&self.valid_ood) && max(&self.valid_ood) < min(&self.test)) {
            return Err(Error::Config("train, depth-validation and test depth ranges must be increasing and disjoint".into()));
        }
        Ok(())
    }
}

/// Manifest written next to the split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: Task,
    pub seed: u64,
    pub plan: SplitPlan,
    pub tokens: Vec<String>,
    pub classes: Vec<String>,
    pub ctl_tables: Option<CtlSpec>,
    pub counts: HashMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub seed: u64,
    pub plan: SplitPlan,
    pub vocab: Vocab,
    pub ctl: Option<CtlSpec>,
    splits: [Vec<Sample>; 4],
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &[Sample] {
        &self.splits[name.index()]
    }

    pub fn token_strings<'a>(&'a self, s: &Sample) -> Vec<&'a str> {
        self.vocab.decode(&s.tokens)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            task: self.task,
            seed: self.seed,
            plan: self.plan.clone(),
            tokens: self.vocab.tokens.clone(),
            classes: self.vocab.classes.clone(),
            ctl_tables: self.ctl.clone(),
            counts: SplitName::ALL.iter().map(|n| (n.to_string(), self.split(*n).len())).collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in SplitName::ALL {
            let path = dir.join(format!("{name}.jsonl"));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for s in self.split(name) {
                serde_json::to_writer(&mut w, &s.to_json(&self.vocab))?;
                w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let vocab = m.task.vocab();
        if vocab.tokens != m.tokens || vocab.classes != m.classes {
            return Err(Error::VocabMismatch(format!("manifest vocabulary differs from task {}", m.task)));
        }
        let mut splits: [Vec<Sample>; 4] = Default::default();
        for name in SplitName::ALL {
            let path = dir.join(format!("{name}.jsonl"));
            let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let j: JsonSample = serde_json::from_str(&line)?;
                splits[name.index()].push(Sample::from_json(&j, &vocab)?);
            }
        }
        Ok(Self {
            task: m.task,
            seed: m.seed,
            plan: m.plan,
            vocab,
            ctl: m.ctl_tables,
            splits,
        })
    }
}

/// Builds all four splits of `task` from `seed`. Output is identical with
/// or without parallelism.
pub fn generate(task: Task, seed: u64, plan: &SplitPlan) -> Result<Dataset> {
    plan.validate()?;
    let streams = Streams::new(seed);
    let vocab = task.vocab();
    let ctl = task.is_ctl().then(|| CtlSpec::random(&mut streams.get("ctl/tables")));
    let mut splits: [Vec<Sample>; 4] = Default::default();
    for name in SplitName::ALL {
        let spec = plan.get(name);
        let mut out = Vec::with_capacity(spec.size);
        for (depth, quota) in spec.quotas() {
            let ctx = GenContext {
                task,
                vocab: &vocab,
                ctl: ctl.as_ref(),
                depth_range: (*spec.depths.iter().min().unwrap(), *spec.depths.iter().max().unwrap()),
            };
            let mut fixed = Vec::new();
            if task.is_ctl() && depth == 1 && name == SplitName::Train {
                fixed = ctx.ctl_unit_pairs()?;
            }
            let remaining = quota.saturating_sub(fixed.len());
            let shards = remaining.div_ceil(SHARD);
            let stream = format!("{}/{name}/{depth}", if task.is_ctl() { "ctl" } else { task.as_str() });
            let parts = par::map_range(shards, |s| -> Result<Vec<Sample>> {
                let mut rng = streams.indexed(&stream, s as u64);
                let n = SHARD.min(remaining - s * SHARD);
                (0..n).map(|_| ctx.sample(&mut rng, depth)).collect()
            });
            out.extend(fixed.into_iter().take(quota));
            for p in parts {
                out.extend(p?);
            }
        }
        splits[name.index()] = out;
    }
    Ok(Dataset {
        task,
        seed,
        plan: plan.clone(),
        vocab,
        ctl,
        splits,
    })
}

struct GenContext<'a> {
    task: Task,
    vocab: &'a Vocab,
    ctl: Option<&'a CtlSpec>,
    depth_range: (u32, u32),
}

impl GenContext<'_> {
    fn ctl_sample(&self, symbol: usize, fs: &[usize]) -> Result<Sample> {
        let spec = self.ctl.expect("ctl tables");
        let target = ctl::ctl_eval(symbol, fs, spec)?;
        let mut toks: Vec<String> = std::iter::once(ctl::symbol_name(symbol)).chain(fs.iter().map(|&f| ctl::function_name(f))).collect();
        if self.task == Task::CtlBackward {
            toks.reverse();
        }
        Ok(Sample {
            tokens: self.vocab.encode(&toks)?,
            target: target as u8,
            depth: fs.len() as u32,
            dep_depth: None,
        })
    }

    fn ctl_unit_pairs(&self) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for f in 0..ctl::N_FUNCTIONS {
            for s in 0..ctl::N_SYMBOLS {
                out.push(self.ctl_sample(s, &[f])?);
            }
        }
        Ok(out)
    }

    fn sample(&self, rng: &mut impl Rng, depth: u32) -> Result<Sample> {
        let d = depth as usize;
        match self.task {
            Task::Ctl | Task::CtlBackward => {
                let (s, fs) = ctl::random_problem(rng, d);
                self.ctl_sample(s, &fs)
            }
            Task::Arith => loop {
                let e = arith::generate(rng, d);
                if e.len() <= MAX_TOKENS {
                    return Ok(Sample {
                        tokens: self.vocab.encode(&e.tokens())?,
                        target: e.eval(),
                        depth,
                        dep_depth: None,
                    });
                }
            },
            Task::Listops => loop {
                // The spine fixes the nesting depth; keep trees whose
                // selected branches reach the same depth.
                let t = listops::generate(rng, d);
                if t.len() > MAX_TOKENS {
                    continue;
                }
                let (value, dep) = t.eval_with_dependency()?;
                let parse_depth = t.depth() as u32;
                if dep == d && parse_depth >= self.depth_range.0 && parse_depth <= self.depth_range.1 {
                    return Ok(Sample {
                        tokens: self.vocab.encode(&t.tokens())?,
                        target: value,
                        depth: parse_depth,
                        dep_depth: Some(dep as u32),
                    });
                }
            },
        }
    }
}

#[cfg(test)]
mod tests;
