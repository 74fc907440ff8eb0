//! Training loop, checkpoint selection and evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{argmax_rows, Batch, EncoderModel};
use crate::par;
use crate::rng::Streams;
use crate::substrate::{clip_gradients, global_grad_norm, AdamW, ParamStore, Tape};
use crate::tasks::{generate, Dataset, Sample, SplitName};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const DIVERGED_CHECKPOINT: &str = "diverged.ckpt";

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub iter: usize,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    /// Global gradient norm after clipping.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub iterations: usize,
    pub best_iter: usize,
    /// Accuracy on the selection split at `best_iter`.
    pub best_accuracy: f64,
    /// IID validation accuracy of the best checkpoint.
    pub valid_iid: f64,
    /// Test accuracy of the best checkpoint.
    pub test_accuracy: f64,
    pub final_loss: f64,
    pub best_checkpoint: PathBuf,
}

/// The dataset a run trains on: read from `data_dir` or generated.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match &cfg.data_dir {
        Some(dir) => Dataset::read(dir)?,
        None => generate(cfg.task, cfg.data_seed, &cfg.plan)?,
    };
    if ds.task != cfg.task {
        return Err(Error::Config(format!("dataset is for task {} but the run is for {}", ds.task, cfg.task)));
    }
    Ok(ds)
}

/// Exact-match accuracy over `samples`, evaluated in batches that may run
/// concurrently.
pub fn accuracy(model: &EncoderModel, store: &ParamStore<f32>, samples: &[Sample], steps: usize, batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let chunks: Vec<&[Sample]> = samples.chunks(batch_size.max(1)).collect();
    let correct = par::map_slice(&chunks, |chunk| -> Result<usize> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, model.config.readout)?;
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let out = model.forward(&mut t, &p, &batch, steps, None, false)?;
        let pred = argmax_rows(t.value(out.logits), model.config.n_classes);
        Ok(pred.iter().zip(chunk.iter()).filter(|(p, s)| **p == s.target as usize).count())
    });
    let correct: usize = correct.into_iter().sum::<Result<usize>>()?;
    Ok(correct as f64 / samples.len() as f64)
}

fn checkpoint(cfg: &RunConfig, ds: &Dataset, store: &ParamStore<f32>, opt: Option<&AdamW<f32>>, iter: usize, best: (usize, f64)) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.model.clone(), store.clone(), opt.cloned());
    for (k, v) in cfg.to_pairs() {
        if k != "resume" {
            ck.meta.insert(format!("run.{k}"), v);
        }
    }
    ck.meta.insert("iteration".into(), iter.to_string());
    ck.meta.insert("best_iter".into(), best.0.to_string());
    ck.meta.insert("best_accuracy".into(), best.1.to_string());
    ck.meta.insert("vocab".into(), ds.vocab.describe());
    ck
}

/// The run configuration stored in a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<RunConfig> {
    let pairs: Vec<(&str, &str)> = ck.meta.iter().filter_map(|(k, v)| k.strip_prefix("run.").map(|k| (k, v.as_str()))).collect();
    if pairs.is_empty() {
        return Err(Error::Checkpoint("no run configuration in checkpoint".into()));
    }
    let cfg = RunConfig::from_pairs(pairs)?;
    if cfg.model != ck.model {
        return Err(Error::Checkpoint("run configuration disagrees with the stored model".into()));
    }
    Ok(cfg)
}

struct Log {
    out: BufWriter<File>,
}

impl Log {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    fn write(&mut self, m: &Metric) -> Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n").map_err(|e| Error::io("metrics", e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("metrics", e))
    }
}

/// Trains on the dataset described by `cfg`, writing metrics and
/// checkpoints into `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    par::with_threads(cfg.threads, || {
        let ds = load_data(cfg)?;
        train_on(cfg, &ds, out)
    })
}

/// [`train`] with an already loaded dataset.
pub fn train_on(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    if ds.vocab != cfg.task.vocab() {
        return Err(Error::VocabMismatch(format!("dataset vocabulary does not match task {}", cfg.task)));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let train = ds.split(SplitName::Train);
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let streams = Streams::new(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let model = EncoderModel::new(cfg.model.clone(), &mut store, &mut streams.get("init"))?;
    let mut opt = AdamW::new(&store, cfg.lr, cfg.weight_decay);
    let mut start = 0;
    let mut best: (usize, f64) = (0, f64::NEG_INFINITY);
    let mut best_store = store.clone();
    let best_path = out.join(BEST_CHECKPOINT);

    if let Some(path) = &cfg.resume {
        let ck = Checkpoint::load(path)?;
        if ck.model != cfg.model {
            return Err(Error::Config(format!("checkpoint {} was trained with a different model configuration", path.display())));
        }
        store = ck.params.clone();
        opt = ck.optimizer.clone().ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        opt.lr = cfg.lr;
        opt.weight_decay = cfg.weight_decay;
        start = ck.meta_get("iteration")?;
        best = (ck.meta_get("best_iter")?, ck.meta_get("best_accuracy")?);
        best_store = match Checkpoint::load(&best_path) {
            Ok(b) if b.meta_get::<usize>("iteration").ok() == Some(best.0) => b.params,
            _ => store.clone(),
        };
    }

    let mut log = Log::open(&out.join(METRICS_FILE), cfg.resume.is_some())?;
    let mut last_loss = f64::NAN;
    let mut iter = start;
    let mut evaluated = start > 0 && best.1.is_finite();
    let select = cfg.select_split;
    while iter < cfg.n_iters {
        iter += 1;
        let mut brng = streams.indexed("batch", iter as u64);
        let picked: Vec<&Sample> = (0..cfg.batch_size).map(|_| &train[brng.gen_range(0..train.len())]).collect();
        let batch = Batch::from_samples(&picked, cfg.model.readout)?;
        let targets: Vec<usize> = picked.iter().map(|s| s.target as usize).collect();

        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let mut drng = streams.indexed("dropout", iter as u64);
        let fwd = model.forward(&mut t, &p, &batch, cfg.model.n_layers, Some(&mut drng), false)?;
        let loss = model.loss(&mut t, &fwd, &targets)?;
        let lv = t.value(loss)[0] as f64;
        let diverged = |store: &ParamStore<f32>, opt: &AdamW<f32>| -> Error {
            let dump = out.join(DIVERGED_CHECKPOINT);
            let saved = checkpoint(cfg, ds, store, Some(opt), iter - 1, best).save(&dump);
            Error::Diverged {
                iter,
                loss: lv,
                dump: if saved.is_ok() { dump } else { PathBuf::from("<unwritable>") },
            }
        };
        if !lv.is_finite() {
            return Err(diverged(&store, &opt));
        }
        let mut grads = t.backward(loss)?;
        store.collect_grads(&p, &mut grads);
        drop(t);
        clip_gradients(&mut store, cfg.grad_clip);
        let norm = global_grad_norm(&store);
        match opt.step(&mut store) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient(_)) => return Err(diverged(&store, &opt)),
            Err(e) => return Err(e),
        }
        store.zero_grads();
        last_loss = lv;
        log.write(&Metric {
            iter,
            split: SplitName::Train.to_string(),
            loss: Some(lv),
            accuracy: None,
            grad_norm: Some(norm),
        })?;

        if iter % cfg.eval_every == 0 || iter == cfg.n_iters {
            let mut accs = Vec::new();
            for split in [SplitName::ValidIid, SplitName::ValidOod] {
                let a = accuracy(&model, &store, ds.split(split), cfg.model.test_steps, cfg.eval_batch_size)?;
                log.write(&Metric {
                    iter,
                    split: split.to_string(),
                    loss: None,
                    accuracy: Some(a),
                    grad_norm: None,
                })?;
                accs.push((split, a));
            }
            let sel = match accs.iter().find(|(s, _)| *s == select) {
                Some(&(_, a)) => a,
                None => accuracy(&model, &store, ds.split(select), cfg.model.test_steps, cfg.eval_batch_size)?,
            };
            evaluated = true;
            if sel > best.1 {
                best = (iter, sel);
                best_store = store.clone();
                checkpoint(cfg, ds, &best_store, None, iter, best).save(&best_path)?;
            }
            checkpoint(cfg, ds, &store, Some(&opt), iter, best).save(&out.join(LAST_CHECKPOINT))?;
            log.flush()?;
            if cfg.early_stop.is_some_and(|target| accs[0].1 >= target) {
                break;
            }
        }
    }
    if !evaluated {
        let a = accuracy(&model, &store, ds.split(select), cfg.model.test_steps, cfg.eval_batch_size)?;
        best = (iter, a);
        best_store = store.clone();
        checkpoint(cfg, ds, &best_store, None, iter, best).save(&best_path)?;
    }
    let valid_iid = accuracy(&model, &best_store, ds.split(SplitName::ValidIid), cfg.model.test_steps, cfg.eval_batch_size)?;
    let test = accuracy(&model, &best_store, ds.split(SplitName::Test), cfg.model.test_steps, cfg.eval_batch_size)?;
    log.write(&Metric {
        iter: best.0,
        split: SplitName::Test.to_string(),
        loss: None,
        accuracy: Some(test),
        grad_norm: None,
    })?;
    log.flush()?;
    Ok(TrainReport {
        iterations: iter,
        best_iter: best.0,
        best_accuracy: best.1,
        valid_iid,
        test_accuracy: test,
        final_loss: last_loss,
        best_checkpoint: best_path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: SplitName,
    pub steps: usize,
    pub samples: usize,
    pub accuracy: f64,
}

/// Accuracy of a saved checkpoint on one split. `data` overrides the
/// dataset recorded in the checkpoint.
pub fn evaluate(path: &Path, split: SplitName, test_steps: Option<usize>, data: Option<&Dataset>) -> Result<EvalReport> {
    let ck = Checkpoint::load(path)?;
    let cfg = checkpoint_config(&ck)?;
    let model = ck.build()?;
    let steps = test_steps.unwrap_or(cfg.model.test_steps);
    if steps < cfg.model.n_layers {
        return Err(Error::Config(format!("test steps {steps} below the {} trained steps", cfg.model.n_layers)));
    }
    let loaded;
    let ds = match data {
        Some(d) => d,
        None => {
            loaded = load_data(&cfg)?;
            &loaded
        }
    };
    let stored: String = ck.meta_get("vocab")?;
    if ds.vocab.describe() != stored {
        return Err(Error::VocabMismatch(format!("checkpoint vocabulary `{stored}` differs from dataset `{}`", ds.vocab.describe())));
    }
    let samples = ds.split(split);
    let acc = accuracy(&model, &ck.params, samples, steps, cfg.eval_batch_size)?;
    Ok(EvalReport {
        split,
        steps,
        samples: samples.len(),
        accuracy: acc,
    })
}

/// Reads `metrics.jsonl`.
pub fn read_metrics(path: &Path) -> Result<Vec<Metric>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
