use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndr_core::harness::{self, gradcheck, RunConfig};
use ndr_core::introspection;
use ndr_core::model::checkpoint::Checkpoint;
use ndr_core::tasks::{generate, Dataset, SplitName, Task, Vocab};
use ndr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ndr", version, about = "Train, evaluate and inspect copy-gated geometric-attention Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and write it as JSONL splits.
    GenData {
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Divide every split size by this factor.
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// Train a model from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: SplitName,
        #[arg(long)]
        test_steps: Option<usize>,
        /// Dataset directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one config key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_name = "KEY=V1,V2,...")]
        axis: String,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Export attention maps and gate activity for one input.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients.
    GradCheck {
        #[arg(long)]
        module: Option<String>,
    },
    /// Mean ACT readout steps per input length.
    Ponder {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: SplitName,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, found `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn read_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let o = overrides.iter().map(|s| split_pair(s)).collect::<Result<Vec<_>>>()?;
    RunConfig::parse_text(&text, &o)
}

fn load_model(path: &Path) -> Result<(Checkpoint, RunConfig, ndr_core::model::EncoderModel, Vocab)> {
    let ck = Checkpoint::load(path)?;
    let cfg = harness::checkpoint_config(&ck)?;
    let model = ck.build()?;
    let vocab = Vocab::from_description(&ck.meta_get::<String>("vocab")?)?;
    Ok((ck, cfg, model, vocab))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { task, seed, out, scale } => {
            let plan = task.default_plan().scaled_down(scale);
            let ds = generate(task, seed, &plan)?;
            ds.write(&out)?;
            for name in SplitName::ALL {
                println!("{name}\t{}", ds.split(name).len());
            }
            println!("wrote {}", out.display());
        }
        Command::Train { config, out, overrides } => {
            let cfg = read_config(&config, &overrides)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join("config.txt");
            std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
            let r = harness::train(&cfg, &out)?;
            println!("iterations\t{}", r.iterations);
            println!("best_iter\t{}", r.best_iter);
            println!("{}\t{:.4}", cfg.select_split, r.best_accuracy);
            println!("valid_iid\t{:.4}", r.valid_iid);
            println!("test\t{:.4}", r.test_accuracy);
            println!("checkpoint\t{}", r.best_checkpoint.display());
        }
        Command::Eval { checkpoint, split, test_steps, data } => {
            let ds = data.as_deref().map(Dataset::read).transpose()?;
            let r = harness::evaluate(&checkpoint, split, test_steps, ds.as_ref())?;
            println!("{}\tsteps={}\tn={}\taccuracy={:.4}", r.split, r.steps, r.samples, r.accuracy);
        }
        Command::Sweep { config, axis, out, overrides } => {
            let cfg = read_config(&config, &overrides)?;
            let (key, values) = harness::parse_axis(&axis)?;
            let rows = harness::sweep(&cfg.to_pairs(), &key, &values, &out)?;
            print!("{}", harness::sweep::format_table(&key, &rows));
        }
        Command::Trace { checkpoint, input, out, steps } => {
            let (ck, cfg, model, vocab) = load_model(&checkpoint)?;
            let steps = steps.unwrap_or(cfg.model.test_steps);
            let trace = introspection::capture_text(&model, &ck.params, &vocab, &input, steps)?;
            let index = introspection::export(&trace, &out)?;
            println!("prediction\t{}", trace.prediction);
            if let Some(p) = &trace.ponder {
                println!("ponder\t{:?}", p.ponder);
            }
            println!("wrote {} files to {}", index.len() + 1, out.display());
        }
        Command::GradCheck { module } => {
            let results = gradcheck::run(module.as_deref())?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!r.passed());
                println!("{}\t{}\tmax_rel_error={:.3e}\tskipped={}\t{status}", r.module, r.case, r.result.max_rel_error, r.result.skipped);
            }
            if failed > 0 {
                return Err(Error::NonFinite(format!("{failed} gradient check(s) exceeded {:e}", gradcheck::TOLERANCE)));
            }
        }
        Command::Ponder { checkpoint, split, data } => {
            let (ck, cfg, model, _) = load_model(&checkpoint)?;
            let ds = match data {
                Some(d) => Dataset::read(&d)?,
                None => harness::load_data(&cfg)?,
            };
            let rows = introspection::ponder_report(&model, &ck.params, ds.split(split), cfg.model.test_steps, cfg.eval_batch_size)?;
            println!("length\tsequences\tmean\tstd\tmax");
            for r in rows {
                println!("{}\t{}\t{:.3}\t{:.3}\t{}", r.length, r.sequences, r.mean, r.std, r.max);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
