use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ndr_core::harness::{self, RunConfig};
use ndr_core::layer::LayerVariant;
use ndr_core::model::{Batch, EncoderModel};
use ndr_core::substrate::{ParamStore, Tape};
use ndr_core::tasks::{generate, Dataset, SplitName, Task};
use ndr_core::Error;

const BASE: &str = "
task=arith
variant=ndr
d_model=16
d_ff=32
n_heads=2
n_layers=4
batch_size=16
n_iters=12
eval_every=6
eval_batch_size=64
lr=0.002
seed=11
threads=1
";

fn small_arith(dir: &std::path::Path) -> Dataset {
    let ds = generate(Task::Arith, 4, &Task::Arith.default_plan().scaled_down(200)).unwrap();
    ds.write(dir).unwrap();
    ds
}

#[test]
fn written_dataset_trains_and_evaluates() {
    let data = tempfile::tempdir().unwrap();
    let ds = small_arith(data.path());
    let back = Dataset::read(data.path()).unwrap();
    for name in SplitName::ALL {
        assert_eq!(back.split(name), ds.split(name));
    }

    let run = tempfile::tempdir().unwrap();
    let dir = data.path().display().to_string();
    let cfg = RunConfig::parse_text(BASE, &[("data_dir".into(), dir)]).unwrap();
    let report = harness::train(&cfg, run.path()).unwrap();
    assert_eq!(report.iterations, 12);
    let eval = harness::evaluate(&report.best_checkpoint, SplitName::Test, None, None).unwrap();
    assert_eq!(eval.samples, ds.split(SplitName::Test).len());
    assert!((eval.accuracy - report.test_accuracy).abs() < 1e-12);
    let longer = harness::evaluate(&report.best_checkpoint, SplitName::Test, Some(8), Some(&back)).unwrap();
    assert_eq!(longer.steps, 8);
}

#[test]
fn checkpoint_refuses_other_task_data() {
    let run = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse_text(BASE, &[("n_iters".into(), "2".into())]).unwrap();
    let report = harness::train(&cfg, run.path()).unwrap();
    let lists = generate(Task::Listops, 0, &Task::Listops.default_plan().scaled_down(1000)).unwrap();
    let err = harness::evaluate(&report.best_checkpoint, SplitName::Test, None, Some(&lists)).unwrap_err();
    assert!(matches!(err, Error::VocabMismatch(_)), "{err}");
}

/// Logits are ~0 at initialization, so the first loss is close to ln(classes)
/// at the preset sizes as well.
#[test]
fn preset_models_start_near_chance() {
    for (task, variant) in [(Task::Ctl, "ndr"), (Task::Arith, "ndr"), (Task::Listops, "standard")] {
        let cfg = RunConfig::preset(task, variant.parse::<LayerVariant>().unwrap());
        let ds = generate(task, 0, &task.default_plan().scaled_down(1000)).unwrap();
        let samples: Vec<_> = ds.split(SplitName::ValidIid).iter().take(8).collect();
        let mut store = ParamStore::new();
        let m = EncoderModel::new(cfg.model.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = Batch::from_samples(&samples, cfg.model.readout).unwrap();
        let mut t = Tape::<f32>::new();
        let p = store.bind(&mut t);
        let out = m.forward(&mut t, &p, &batch, cfg.model.n_layers, None, false).unwrap();
        let targets: Vec<usize> = samples.iter().map(|s| s.target as usize).collect();
        let loss = m.loss(&mut t, &out, &targets).unwrap();
        let chance = (cfg.model.n_classes as f32).ln();
        let v = t.value(loss)[0];
        assert!((v - chance).abs() < 0.35, "{task} {variant}: {v} vs {chance}");
    }
}

#[test]
fn shipped_configs_parse_and_full_size_ones_match_presets() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("cfg") {
            continue;
        }
        let cfg = RunConfig::parse_text(&std::fs::read_to_string(&path).unwrap(), &[]).unwrap();
        seen += 1;
        if path.file_stem().unwrap().to_str().unwrap().ends_with("smoke") {
            continue;
        }
        let mut preset = RunConfig::preset(cfg.task, cfg.model.variant);
        preset.model.act = cfg.model.act;
        preset.model.act_weight = cfg.model.act_weight;
        preset.eval_every = cfg.eval_every;
        assert_eq!(cfg, preset, "{}", path.display());
    }
    assert!(seen >= 5);
}
