use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::*;
use crate::substrate::{grad_check, AdamW};

fn config(variant: &str, act: Option<ActVariant>) -> ModelConfig {
    let mut c = ModelConfig::new(12, 5, variant.parse().unwrap());
    c.d_model = 8;
    c.d_ff = 16;
    c.n_heads = 2;
    c.n_layers = 3;
    c.test_steps = 4;
    c.act = act;
    c
}

fn build<S: Real>(c: &ModelConfig, seed: u64) -> (ParamStore<S>, EncoderModel) {
    let mut store = ParamStore::new();
    let m = EncoderModel::new(c.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, m)
}

fn logits(store: &ParamStore<f64>, m: &EncoderModel, batch: &Batch, steps: usize) -> Vec<f64> {
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let out = m.forward(&mut t, &p, batch, steps, None, false).unwrap();
    t.value(out.logits).to_vec()
}

const VARIANTS: [&str; 6] = ["standard", "relative", "geometric", "rel_gate", "abs_rel_gate", "ndr"];

#[test]
fn batch_wraps_and_pads() {
    let b = Batch::new(&[&[5, 6, 7], &[8]], Readout::Last).unwrap();
    assert_eq!(b.len(), 5);
    assert_eq!(b.ids, vec![1, 5, 6, 7, 2, 1, 8, 2, 0, 0]);
    assert_eq!(b.readout_rows, vec![4, 7]);
    assert_eq!(b.mask.valid, vec![true, true, true, true, true, true, true, true, false, false]);
    let f = Batch::new(&[&[5, 6, 7], &[8]], Readout::First).unwrap();
    assert_eq!(f.readout_rows, vec![0, 5]);
    assert!(Batch::new(&[&[5], &[]], Readout::Last).is_err());
    assert!(Batch::new(&[], Readout::Last).is_err());
}

#[test]
fn parameter_count_does_not_depend_on_steps() {
    for v in VARIANTS {
        let mut a = config(v, None);
        let (sa, _) = build::<f32>(&a, 0);
        a.n_layers = 6;
        a.test_steps = 12;
        let (sb, _) = build::<f32>(&a, 0);
        assert_eq!(sa.numel(), sb.numel(), "{v}");
    }
}

#[test]
fn padding_a_batch_does_not_change_results() {
    for v in VARIANTS {
        for act in [None, Some(ActVariant::A)] {
            let c = config(v, act);
            let (store, m) = build::<f64>(&c, 1);
            let short: &[u8] = &[3, 4, 5];
            let alone = logits(&store, &m, &Batch::new(&[short], Readout::Last).unwrap(), 3);
            let both = logits(&store, &m, &Batch::new(&[short, &[6, 7, 8, 9, 10, 11]], Readout::Last).unwrap(), 3);
            for (a, b) in alone.iter().zip(&both[..5]) {
                assert!((a - b).abs() < 1e-10, "{v} {act:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn readout_column_matters() {
    let c = config("ndr", None);
    let (store, m) = build::<f64>(&c, 2);
    let last = logits(&store, &m, &Batch::new(&[&[3, 4, 5]], Readout::Last).unwrap(), 3);
    let first = logits(&store, &m, &Batch::new(&[&[3, 4, 5]], Readout::First).unwrap(), 3);
    assert!(last.iter().zip(&first).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn zero_readout_gives_uniform_loss() {
    let c = config("ndr", None);
    let (mut store, m) = build::<f64>(&c, 3);
    for x in store.get_mut(m.out_w).tensor.data_mut() {
        *x = 0.0;
    }
    let batch = Batch::new(&[&[3, 4], &[5, 6, 7]], Readout::Last).unwrap();
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let out = m.forward(&mut t, &p, &batch, 3, None, false).unwrap();
    let loss = m.loss(&mut t, &out, &[0, 4]).unwrap();
    assert!((t.value(loss)[0] - (5f64).ln()).abs() < 1e-12);
}

#[test]
fn act_loss_is_added_exactly() {
    for v in [ActVariant::A, ActVariant::U] {
        let c = config("ndr", Some(v));
        let (store, m) = build::<f64>(&c, 4);
        let batch = Batch::new(&[&[3, 4], &[5, 6, 7]], Readout::Last).unwrap();
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let out = m.forward(&mut t, &p, &batch, 4, None, false).unwrap();
        let total = m.loss(&mut t, &out, &[1, 2]).unwrap();
        let ce = t.cross_entropy(out.logits, &[1, 2]).unwrap();
        let act = out.act.as_ref().unwrap();
        let expect = t.value(ce)[0] + t.value(act.loss)[0];
        assert_eq!(t.value(total)[0], expect);
        assert!(out.steps_run <= 4);
    }
}

#[test]
fn bad_inputs_are_reported() {
    let c = config("ndr", None);
    let (store, m) = build::<f64>(&c, 5);
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let bad = Batch::new(&[&[3, 40]], Readout::Last).unwrap();
    assert!(matches!(m.forward(&mut t, &p, &bad, 2, None, false), Err(Error::UnknownToken(_))));
    let ok = Batch::new(&[&[3]], Readout::Last).unwrap();
    let out = m.forward(&mut t, &p, &ok, 2, None, false).unwrap();
    assert!(matches!(m.loss(&mut t, &out, &[5]), Err(Error::TargetOutOfRange { target: 5, classes: 5 })));
    assert!(m.forward(&mut t, &p, &ok, 0, None, false).is_err());
}

#[test]
fn trace_captures_every_step() {
    let c = config("ndr", None);
    let (store, m) = build::<f32>(&c, 6);
    let batch = Batch::new(&[&[3, 4, 5]], Readout::Last).unwrap();
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let out = m.forward(&mut t, &p, &batch, 4, None, true).unwrap();
    assert_eq!(out.captures.len(), 4);
    for s in &out.captures {
        assert_eq!(s.attention.len(), 2 * 5 * 5);
        assert_eq!(s.gate.as_ref().unwrap().len(), 5 * 8);
    }
}

#[test]
fn depth_heuristic_examples() {
    assert_eq!(depth_heuristic(10, 1, 2), 12);
    assert_eq!(depth_heuristic(8, 2, 4), 20);
}

#[test]
fn config_pairs_round_trip_and_validate() {
    let c = config("abs_rel_gate", Some(ActVariant::U));
    assert_eq!(ModelConfig::from_pairs(&c.to_pairs()).unwrap(), c);
    let mut bad = c.clone();
    bad.test_steps = 2;
    assert!(bad.validate().is_err());
    bad = c;
    bad.n_heads = 3;
    assert!(bad.validate().is_err());
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let c = config("geometric", Some(ActVariant::A));
    let (mut store, m) = build::<f32>(&c, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut opt = AdamW::new(&store, 1e-3, 0.01);
    let batch = Batch::new(&[&[3, 4], &[5]], Readout::Last).unwrap();
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let out = m.forward(&mut t, &p, &batch, 3, Some(&mut rng), false).unwrap();
    let loss = m.loss(&mut t, &out, &[0, 1]).unwrap();
    let mut g = t.backward(loss).unwrap();
    store.collect_grads(&p, &mut g);
    opt.step(&mut store).unwrap();

    let mut ck = Checkpoint::new(c.clone(), store.clone(), Some(opt.clone()));
    ck.meta.insert("iteration".into(), "1".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model, c);
    assert_eq!(back.meta_get::<u64>("iteration").unwrap(), 1);
    for (a, b) in store.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.decay, b.decay);
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
    let bo = back.optimizer.unwrap();
    assert_eq!(bo.step, opt.step);
    assert_eq!(bo.m[3].data(), opt.m[3].data());
    assert_eq!(bo.v[5].data(), opt.v[5].data());

    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"garbage!").is_err());
}

#[test]
fn whole_model_gradient_matches_finite_differences() {
    for (v, act) in [("ndr", None), ("standard", None), ("geometric", Some(ActVariant::U))] {
        let mut c = config(v, act);
        c.d_model = 4;
        c.d_ff = 8;
        c.n_layers = 2;
        let (mut store, m) = build::<f64>(&c, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in store.iter_mut() {
            for x in p.tensor.data_mut() {
                *x += rng.gen_range(-0.2..0.2);
            }
        }
        let batch = Batch::new(&[&[3, 4, 5], &[6]], Readout::Last).unwrap();
        let point: Vec<f64> = store.flatten();
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut s = store.clone();
            s.assign_flat(x)?;
            let mut t = Tape::new();
            let p = s.bind(&mut t);
            let out = m.forward(&mut t, &p, &batch, 2, None, false)?;
            let loss = m.loss(&mut t, &out, &[1, 3])?;
            let value = t.value(loss)[0];
            let mut g = t.backward(loss)?;
            s.collect_grads(&p, &mut g);
            Ok((value, s.flatten_grads()))
        };
        let r = grad_check(f, &point, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-3, "{v}: {r:?}");
        store.zero_grads();
    }
}
