use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::substrate::{grad_check, sigmoid, Tensor};

fn config(variant: LayerVariant, d: usize) -> LayerConfig {
    LayerConfig {
        d_model: d,
        d_ff: 2 * d,
        n_heads: 2,
        variant,
        dropout: 0.0,
        attention_dropout: 0.0,
    }
}

fn build(variant: LayerVariant, d: usize, seed: u64, perturb: bool) -> (ParamStore<f64>, GatedLayerParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = GatedLayerParams::new(&mut store, "layer", config(variant, d), &mut rng).unwrap();
    if perturb {
        for p in store.iter_mut() {
            for x in p.tensor.data_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }
    (store, layer)
}

fn input(rows: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = (var + crate::substrate::tape::LAYER_NORM_EPS).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) / s * g + b).collect()
}

fn ffn(store: &ParamStore<f64>, f: &Ffn, x: &[f64]) -> Vec<f64> {
    let w1 = store.get(f.w1).tensor.clone();
    let w2 = store.get(f.w2).tensor.clone();
    let (din, dh) = (w1.shape()[0], w1.shape()[1]);
    let hidden: Vec<f64> = (0..dh)
        .map(|c| (store.get(f.b1).tensor.data()[c] + (0..din).map(|k| x[k] * w1.data()[k * dh + c]).sum::<f64>()).max(0.0))
        .collect();
    (0..din)
        .map(|c| store.get(f.b2).tensor.data()[c] + (0..dh).map(|k| hidden[k] * w2.data()[k * din + c]).sum::<f64>())
        .collect()
}

/// Per-column reference built on top of the (separately verified)
/// attention output. Returns `(out, u, g)` per row.
fn reference(store: &ParamStore<f64>, layer: &GatedLayerParams, h: &[f64], mask: &AttentionMask) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = layer.config.d_model;
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let x = t.constant(Tensor::new(&[mask.rows(), d], h.to_vec()).unwrap());
    let att = layer.attention.forward(&mut t, &p, x, mask, None).unwrap();
    let att = t.value(att.out).to_vec();
    let get = |id: ParamId| store.get(id).tensor.data().to_vec();
    let (mut out, mut us, mut gs) = (vec![], vec![], vec![]);
    for r in 0..mask.rows() {
        let hr = &h[r * d..(r + 1) * d];
        if !mask.valid[r] {
            out.extend_from_slice(hr);
            us.extend(vec![0.0; d]);
            gs.extend(vec![0.0; d]);
            continue;
        }
        let res: Vec<f64> = (0..d).map(|c| att[r * d + c] + hr[c]).collect();
        let a = layer_norm(&res, &get(layer.ln1.gain), &get(layer.ln1.bias));
        let f = ffn(store, &layer.ffn_data, &a);
        match layer.ffn_gate {
            Some(gate) => {
                let u = match layer.config.variant.norm {
                    Norm::LayerNorm => {
                        let ln = layer.ln2.unwrap();
                        layer_norm(&f, &get(ln.gain), &get(ln.bias))
                    }
                    Norm::Tanh => f.iter().map(|v| v.tanh()).collect(),
                };
                let g: Vec<f64> = ffn(store, &gate, &a).into_iter().map(sigmoid).collect();
                out.extend((0..d).map(|c| g[c] * u[c] + (1.0 - g[c]) * hr[c]));
                us.extend(u);
                gs.extend(g);
            }
            None => {
                let ln = layer.ln2.unwrap();
                let res2: Vec<f64> = (0..d).map(|c| f[c] + a[c]).collect();
                out.extend(layer_norm(&res2, &get(ln.gain), &get(ln.bias)));
            }
        }
    }
    (out, us, gs)
}

fn step(store: &ParamStore<f64>, layer: &GatedLayerParams, h: &[f64], mask: &AttentionMask) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let x = t.constant(Tensor::new(&[mask.rows(), layer.config.d_model], h.to_vec()).unwrap());
    let o = layer.step(&mut t, &p, x, mask, None).unwrap();
    (t.value(o.out).to_vec(), o.gate.map(|g| t.value(g).to_vec()))
}

#[test]
fn every_variant_matches_column_reference() {
    let d = 8;
    let mask = AttentionMask::from_lengths(&[5, 3], 5);
    for (i, (name, v)) in LayerVariant::PRESETS.iter().enumerate() {
        let (store, layer) = build(*v, d, i as u64, true);
        let h = input(mask.rows(), d, 40);
        let (out, _) = step(&store, &layer, &h, &mask);
        let (expect, _, _) = reference(&store, &layer, &h, &mask);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-10, "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn closed_gate_is_an_exact_skip() {
    let d = 8;
    let mask = AttentionMask::full(2, 4);
    for v in [LayerVariant::ndr(), LayerVariant::gated(AttentionKind::Relative, Norm::Tanh)] {
        let (mut store, layer) = build(v, d, 3, true);
        store.get_mut(layer.ffn_gate.unwrap().b2).tensor.data_mut().fill(-1e30);
        let h = input(mask.rows(), d, 1);
        let (out, g) = step(&store, &layer, &h, &mask);
        assert!(g.unwrap().iter().all(|&x| x == 0.0));
        assert!(out.iter().zip(&h).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn closed_gate_is_an_exact_skip_in_single_precision() {
    let d = 8;
    let mask = AttentionMask::full(1, 5);
    let (store, layer) = build(LayerVariant::ndr(), d, 3, true);
    let mut store: ParamStore<f32> = store.cast();
    store.get_mut(layer.ffn_gate.unwrap().b2).tensor.data_mut().fill(-1e30);
    let h: Vec<f32> = input(mask.rows(), d, 1).into_iter().map(|x| x as f32).collect();
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let x = t.constant(Tensor::new(&[mask.rows(), d], h.clone()).unwrap());
    let o = layer.step(&mut t, &p, x, &mask, None).unwrap();
    assert!(t.value(o.out).iter().zip(&h).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn open_gate_outputs_the_update() {
    let d = 8;
    let mask = AttentionMask::full(1, 5);
    let (mut store, layer) = build(LayerVariant::ndr(), d, 4, true);
    store.get_mut(layer.ffn_gate.unwrap().b2).tensor.data_mut().fill(1e30);
    let h = input(mask.rows(), d, 2);
    let (out, _) = step(&store, &layer, &h, &mask);
    let (_, u, _) = reference(&store, &layer, &h, &mask);
    for (x, y) in out.iter().zip(&u) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn fresh_gate_is_mostly_closed() {
    let d = 32;
    let mut total = 0.0;
    let mut count = 0;
    for seed in 0..4 {
        let (store, layer) = build(LayerVariant::ndr(), d, seed, false);
        let mask = AttentionMask::full(4, 10);
        let (_, g) = step(&store, &layer, &input(mask.rows(), d, 100 + seed), &mask);
        let g = g.unwrap();
        total += g.iter().sum::<f64>();
        count += g.len();
    }
    let mean = total / count as f64;
    assert!((mean - sigmoid(-3.0)).abs() < 0.02, "{mean}");
}

#[test]
fn pad_columns_pass_through() {
    let d = 8;
    let mask = AttentionMask::from_lengths(&[2, 4], 4);
    for (_, v) in LayerVariant::PRESETS {
        let (store, layer) = build(v, d, 9, true);
        let h = input(mask.rows(), d, 3);
        let (out, _) = step(&store, &layer, &h, &mask);
        for r in [2, 3] {
            assert_eq!(&out[r * d..(r + 1) * d], &h[r * d..(r + 1) * d]);
        }
    }
}

#[test]
fn single_column_sequence_runs() {
    for (_, v) in LayerVariant::PRESETS {
        let (store, layer) = build(v, 8, 1, false);
        let mask = AttentionMask::full(1, 1);
        let (out, _) = step(&store, &layer, &input(1, 8, 0), &mask);
        assert!(out.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn data_ffn_receives_gradient_through_closed_gate() {
    let d = 8;
    let (mut store, layer) = build(LayerVariant::ndr(), d, 2, false);
    let mask = AttentionMask::full(2, 5);
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let x = t.constant(Tensor::new(&[mask.rows(), d], input(mask.rows(), d, 8)).unwrap());
    let o = layer.step(&mut t, &p, x, &mask, None).unwrap();
    let sq = t.mul(o.out, o.out).unwrap();
    let loss = t.sum(sq);
    let mut g = t.backward(loss).unwrap();
    store.collect_grads(&p, &mut g);
    let gw = store.get(layer.ffn_data.w1).grad.as_ref().unwrap();
    assert!(gw.data().iter().any(|&x| x.abs() > 1e-8));
}

#[test]
fn gradients_match_finite_differences() {
    let d = 8;
    let mask = AttentionMask::from_lengths(&[4, 3], 4);
    for (name, v) in LayerVariant::PRESETS {
        let (store, layer) = build(v, d, 5, true);
        let h = input(mask.rows(), d, 6);
        let proj = input(mask.rows(), d, 7);
        let f = |flat: &[f64]| {
            let mut s = store.clone();
            s.assign_flat(flat)?;
            let mut t = Tape::new();
            let p = s.bind(&mut t);
            let x = t.constant(Tensor::new(&[mask.rows(), d], h.clone())?);
            let o = layer.step(&mut t, &p, x, &mask, None)?;
            let w = t.constant(Tensor::new(&[mask.rows(), d], proj.clone())?);
            let m = t.mul(o.out, w)?;
            let loss = t.sum(m);
            let value = t.value(loss)[0];
            let mut g = t.backward(loss)?;
            s.collect_grads(&p, &mut g);
            Ok((value, s.flatten_grads()))
        };
        let r = grad_check(f, &store.flatten(), 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-3, "{name}: {r:?}");
    }
}

#[test]
fn variant_names_round_trip() {
    for (name, v) in LayerVariant::PRESETS {
        assert_eq!(name.parse::<LayerVariant>().unwrap(), v);
        assert_eq!(v.name(), name);
    }
    let custom: LayerVariant = "geometric+gate+tanh".parse().unwrap();
    assert_eq!(custom, LayerVariant::gated(AttentionKind::Geometric, Norm::Tanh));
    assert_eq!(custom.to_string(), "geometric+gate+tanh");
    assert!("transformer".parse::<LayerVariant>().is_err());
}
