use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ndr_core::harness;
use ndr_core::model::{Batch, EncoderModel, ModelConfig, Readout};
use ndr_core::par;
use ndr_core::substrate::gemm::gemm;
use ndr_core::substrate::{ParamStore, Tape};
use ndr_core::tasks::{generate, SplitName, Task};

const PATHS: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn bench_gemm(c: &mut Criterion) {
    let n = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f32; n * n];
    let mut g = c.benchmark_group("gemm_256");
    for (name, on) in PATHS {
        par::set_enabled(on);
        g.bench_function(name, |bch| {
            bch.iter(|| gemm(n, n, n, black_box(&a), false, black_box(&b), false, &mut out, false))
        });
    }
    g.finish();
    par::set_enabled(true);
}

fn small_model() -> (EncoderModel, ParamStore<f32>) {
    let vocab = Task::Ctl.vocab();
    let mut cfg = ModelConfig::new(vocab.len(), vocab.n_classes(), "ndr".parse().unwrap());
    cfg.d_model = 64;
    cfg.d_ff = 128;
    cfg.n_heads = 2;
    cfg.n_layers = 6;
    cfg.test_steps = 6;
    let mut store = ParamStore::new();
    let m = EncoderModel::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    (m, store)
}

fn bench_forward(c: &mut Criterion) {
    let (m, store) = small_model();
    let ds = generate(Task::Ctl, 0, &Task::Ctl.default_plan().scaled_down(50)).unwrap();
    let samples = ds.split(SplitName::ValidIid);
    let refs: Vec<_> = samples.iter().take(64).collect();
    let batch = Batch::from_samples(&refs, Readout::Last).unwrap();
    let mut g = c.benchmark_group("forward_ndr_b64");
    g.sample_size(20);
    for (name, on) in PATHS {
        par::set_enabled(on);
        g.bench_function(name, |bch| {
            bch.iter(|| {
                let mut t = Tape::new();
                let p = store.bind(&mut t);
                let out = m.forward(&mut t, &p, &batch, 6, None, false).unwrap();
                black_box(t.value(out.logits)[0])
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("accuracy");
    g.sample_size(10);
    for (name, on) in PATHS {
        par::set_enabled(on);
        g.bench_with_input(BenchmarkId::new(name, samples.len()), samples, |bch, s| {
            bch.iter(|| harness::accuracy(&m, &store, s, 6, 32).unwrap())
        });
    }
    g.finish();
    par::set_enabled(true);
}

fn bench_generate(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate");
    g.sample_size(10);
    for task in [Task::Arith, Task::Listops] {
        let plan = task.default_plan().scaled_down(200);
        for (name, on) in PATHS {
            par::set_enabled(on);
            g.bench_function(BenchmarkId::new(name, task.as_str()), |bch| {
                bch.iter(|| generate(task, 0, &plan).unwrap())
            });
        }
    }
    g.finish();
    par::set_enabled(true);
}

criterion_group!(benches, bench_gemm, bench_forward, bench_generate);
criterion_main!(benches);
