//! Finite-difference checks of every differentiable module in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionKind, AttentionMask, AttentionParams};
use crate::error::{Error, Result};
use crate::layer::{act_halting, ActConfig, ActParams, ActState, ActVariant, GatedLayerParams, LayerConfig, LayerVariant};
use crate::model::{Batch, EncoderModel, ModelConfig, Readout};
use crate::substrate::{grad_check_split, Bound, GradCheck, ParamStore, Tape, Tensor, Var};

pub const MODULES: [&str; 4] = ["attention", "layer", "act", "model"];
pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-3;
const D: usize = 8;
const N: usize = 4;
const LENGTHS: [usize; 2] = [4, 3];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub module: String,
    pub case: String,
    pub result: GradCheck,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.result.max_rel_error < TOLERANCE
    }
}

fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for x in p.tensor.data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
}

/// Checks the gradient of `sum(out ⊙ w)` (+ `extra`) with respect to all
/// parameters and the input states.
fn check_states<F>(store: &ParamStore<f64>, seed: u64, run: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &Bound, Var, &AttentionMask) -> Result<(Var, Option<Var>)> + Sync + Send,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = AttentionMask::from_lengths(&LENGTHS, N);
    let rows = mask.rows();
    let h0: Vec<f64> = (0..rows * D).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..rows * D).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n_params = store.numel();
    let mut point = store.flatten();
    point.extend_from_slice(&h0);
    let forward = |x: &[f64]| -> Result<(Tape<f64>, ParamStore<f64>, Bound, Var, Var)> {
        let mut s = store.clone();
        s.assign_flat(&x[..n_params])?;
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let h = t.leaf(Tensor::new(&[rows, D], x[n_params..].to_vec())?, true);
        let (out, extra) = run(&mut t, &p, h, &mask)?;
        let wv = t.constant(Tensor::new(&[rows, D], w.clone())?);
        let prod = t.mul(out, wv)?;
        let mut loss = t.sum(prod);
        if let Some(e) = extra {
            loss = t.add(loss, e)?;
        }
        Ok((t, s, p, h, loss))
    };
    let value = |x: &[f64]| -> Result<f64> {
        let (t, _, _, _, loss) = forward(x)?;
        Ok(t.value(loss)[0])
    };
    let full = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (mut t, mut s, p, h, loss) = forward(x)?;
        let v = t.value(loss)[0];
        let mut g = t.backward(loss)?;
        let dh = g.take(h).unwrap_or_else(|| vec![0.0; rows * D]);
        s.collect_grads(&p, &mut g);
        let mut grad = s.flatten_grads();
        grad.extend(dh);
        Ok((v, grad))
    };
    grad_check_split(value, full, &point, STEP)
}

fn attention_case(kind: AttentionKind, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let att = AttentionParams::new(&mut store, "att", AttentionConfig::new(D, 2, kind), &mut rng)?;
    perturb(&mut store, &mut rng);
    check_states(&store, seed, |t, p, h, mask| Ok((att.forward(t, p, h, mask, None)?.out, None)))
}

fn layer_config(variant: LayerVariant) -> LayerConfig {
    LayerConfig {
        d_model: D,
        d_ff: 2 * D,
        n_heads: 2,
        variant,
        dropout: 0.0,
        attention_dropout: 0.0,
    }
}

fn layer_case(variant: LayerVariant, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = GatedLayerParams::new(&mut store, "layer", layer_config(variant), &mut rng)?;
    perturb(&mut store, &mut rng);
    check_states(&store, seed, |t, p, h, mask| Ok((layer.step(t, p, h, mask, None)?.out, None)))
}

/// NDR steps wrapped in ACT; the loss includes the ACT regularizer.
fn act_case(variant: ActVariant, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = GatedLayerParams::new(&mut store, "layer", layer_config(LayerVariant::ndr()), &mut rng)?;
    let act = ActParams::new(&mut store, "act", D, &mut rng)?;
    perturb(&mut store, &mut rng);
    check_states(&store, seed, |t, p, h, mask| {
        let mut state = ActState::new(ActConfig::new(variant, 3), mask, D)?;
        let mut x = h;
        while !state.finished() {
            x = layer.step(t, p, x, mask, None)?.out;
            let p_hat = act_halting(t, p, &act, x)?;
            state.update(t, x, p_hat)?;
        }
        let o = state.finish(t)?;
        Ok((o.out, Some(o.loss)))
    })
}

fn model_case(variant: LayerVariant, act: Option<ActVariant>, seed: u64) -> Result<GradCheck> {
    let mut c = ModelConfig::new(10, 4, variant);
    c.d_model = D;
    c.d_ff = 2 * D;
    c.n_heads = 2;
    c.n_layers = 2;
    c.test_steps = 2;
    c.act = act;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = EncoderModel::new(c, &mut store, &mut rng)?;
    perturb(&mut store, &mut rng);
    let batch = Batch::new(&[&[3, 4], &[5]], Readout::Last)?;
    let forward = |x: &[f64]| -> Result<(Tape<f64>, ParamStore<f64>, Bound, Var)> {
        let mut s = store.clone();
        s.assign_flat(x)?;
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let out = m.forward(&mut t, &p, &batch, 2, None, false)?;
        let loss = m.loss(&mut t, &out, &[1, 3])?;
        Ok((t, s, p, loss))
    };
    let value = |x: &[f64]| -> Result<f64> {
        let (t, _, _, loss) = forward(x)?;
        Ok(t.value(loss)[0])
    };
    let full = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (mut t, mut s, p, loss) = forward(x)?;
        let v = t.value(loss)[0];
        let mut g = t.backward(loss)?;
        s.collect_grads(&p, &mut g);
        Ok((v, s.flatten_grads()))
    };
    grad_check_split(value, full, &store.flatten(), STEP)
}

/// Runs the checks of one module, or of all of them.
pub fn run(module: Option<&str>) -> Result<Vec<CheckResult>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Config(format!("unknown module `{m}` (expected one of {})", MODULES.join(", "))));
        }
    }
    let wanted = |m: &str| module.is_none_or(|x| x == m);
    let mut out = Vec::new();
    let mut push = |module: &str, case: String, result: GradCheck| {
        out.push(CheckResult {
            module: module.into(),
            case,
            result,
        })
    };
    if wanted("attention") {
        for (i, kind) in AttentionKind::ALL.into_iter().enumerate() {
            push("attention", kind.to_string(), attention_case(kind, 10 + i as u64)?);
        }
    }
    if wanted("layer") {
        for (i, (name, v)) in LayerVariant::PRESETS.into_iter().enumerate() {
            push("layer", name.to_string(), layer_case(v, 20 + i as u64)?);
        }
    }
    if wanted("act") {
        for (i, v) in [ActVariant::A, ActVariant::U].into_iter().enumerate() {
            push("act", format!("act_{v}"), act_case(v, 30 + i as u64)?);
        }
    }
    if wanted("model") {
        push("model", "ndr".into(), model_case(LayerVariant::ndr(), None, 40)?);
        push("model", "standard".into(), model_case("standard".parse()?, None, 41)?);
        push("model", "ndr+act_A".into(), model_case(LayerVariant::ndr(), Some(ActVariant::A), 42)?);
    }
    Ok(out)
}
