//! Geometric attention: each target attends to its closest matching source.
//!
//! For target `i` the sources are visited in order of closeness, with the
//! right neighbour winning ties: `i+1, i-1, i+2, i-2, ...`. Source `j` gets
//! weight `P[i,j] * prod(1 - P[i,k])` over every `k` visited before it, so a
//! confident close match shadows all farther ones. The product is evaluated
//! as a running sum of `log(1 - P)` along that order.

use crate::error::{Error, Result};
use crate::par;
use crate::substrate::{log_sigmoid, sigmoid, CustomOp, Real, Tape, Var};

/// Sources of `target` (0-based) sorted by closeness; `target` itself is
/// excluded.
pub fn closeness_order(target: usize, len: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(len.saturating_sub(1));
    for dist in 1..len {
        if target + dist < len {
            order.push(target + dist);
        }
        if dist <= target {
            order.push(target - dist);
        }
    }
    order
}

/// Walks the closeness order of `target`, yielding `(source, exclusive
/// log-survival)` where the second value is the sum of `log(1 - P)` over the
/// sources visited earlier. `log_survive` must be 0 for masked sources.
fn walk<S: Real>(target: usize, log_survive: &[S], mut f: impl FnMut(usize, S)) {
    let len = log_survive.len();
    let mut running = S::zero();
    for dist in 1..len {
        for j in [target.checked_add(dist).filter(|&j| j < len), target.checked_sub(dist)]
            .into_iter()
            .flatten()
        {
            f(j, running);
            running = running + log_survive[j];
        }
    }
}

/// Attention weights from match probabilities `P` (row-major `len×len`,
/// entries in `[0, 1]`). The diagonal of the result is zero.
pub fn geometric_weights<S: Real>(p: &[S], len: usize) -> Result<Vec<S>> {
    if p.len() != len * len {
        return Err(Error::shape("geometric_weights", &[len, len], &[p.len()]));
    }
    if let Some(bad) = p.iter().find(|&&x| !(x >= S::zero() && x <= S::one())) {
        return Err(Error::Domain(format!("match probability {bad:?} outside [0, 1]")));
    }
    let mut out = vec![S::zero(); len * len];
    let mut log_survive = vec![S::zero(); len];
    for i in 0..len {
        let row = &p[i * len..(i + 1) * len];
        for (l, &x) in log_survive.iter_mut().zip(row) {
            *l = (-x).ln_1p();
        }
        let dst = &mut out[i * len..(i + 1) * len];
        walk(i, &log_survive, |j, before| {
            dst[j] = row[j] * before.exp();
        });
    }
    Ok(out)
}

/// Geometric weights from match logits `z` of shape `[..., len, len]`, with
/// `P = sigmoid(z)`. `valid[b * len + j]` marks real (non-pad) sources of
/// sequence `b`; the leading axes of `z` are `[batch, heads]`. Pad sources
/// behave as `P = 0`.
pub fn geometric_from_logits<S: Real>(
    tape: &mut Tape<S>,
    z: Var,
    valid: &[bool],
    batch: usize,
    len: usize,
) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    let rows = shape.iter().product::<usize>() / (len * len).max(1);
    if shape.len() < 2 || shape[shape.len() - 1] != len || shape[shape.len() - 2] != len || batch == 0 || !rows.is_multiple_of(batch) || valid.len() != batch * len {
        return Err(Error::shape("geometric_attention", &shape, &[batch, len]));
    }
    let heads = rows / batch;
    let zv = tape.value(z);
    let mut out = vec![S::zero(); zv.len()];
    par::for_each_chunk_mut(&mut out, len * len, |g, block| {
        let b = g / heads;
        let mask = &valid[b * len..(b + 1) * len];
        geometric_block_forward(&zv[g * len * len..(g + 1) * len * len], mask, block);
    });
    let op = GeometricOp {
        valid: valid.to_vec(),
        heads,
        len,
    };
    tape.custom(&[z], out, shape, Box::new(op))
}

fn geometric_block_forward<S: Real>(z: &[S], valid: &[bool], out: &mut [S]) {
    let len = valid.len();
    let mut log_survive = vec![S::zero(); len];
    for i in 0..len {
        let zr = &z[i * len..(i + 1) * len];
        for j in 0..len {
            log_survive[j] = if valid[j] && j != i { log_sigmoid(-zr[j]) } else { S::zero() };
        }
        let dst = &mut out[i * len..(i + 1) * len];
        walk(i, &log_survive, |j, before| {
            if valid[j] {
                dst[j] = (log_sigmoid(zr[j]) + before).exp();
            }
        });
    }
}

struct GeometricOp {
    valid: Vec<bool>,
    heads: usize,
    len: usize,
}

impl<S: Real> CustomOp<S> for GeometricOp {
    fn name(&self) -> &'static str {
        "geometric_attention"
    }

    fn backward(&self, grad_out: &[S], inputs: &[&[S]], output: &[S]) -> Vec<Option<Vec<S>>> {
        // With lp = log P and ls = log(1 - P):
        //   dL/dlp[j] = g[j] * A[j]
        //   dL/dls[k] = sum of g[j] * A[j] over sources j visited after k
        // and dlp/dz = 1 - P, dls/dz = -P.
        let len = self.len;
        let z = inputs[0];
        let mut dz = vec![S::zero(); z.len()];
        par::for_each_chunk_mut(&mut dz, len * len, |g, block| {
            let b = g / self.heads;
            let valid = &self.valid[b * len..(b + 1) * len];
            let base = g * len * len;
            for i in 0..len {
                let row = base + i * len;
                let order = closeness_order(i, len);
                let mut tail = S::zero();
                for &j in order.iter().rev() {
                    if !valid[j] {
                        continue;
                    }
                    let ga = grad_out[row + j] * output[row + j];
                    let p = sigmoid(z[row + j]);
                    block[i * len + j] = ga * (S::one() - p) - tail * p;
                    tail = tail + ga;
                }
            }
        });
        vec![Some(dz)]
    }
}

/// Direct product-form weights for one row, used to cross-check the
/// log-space path.
pub fn geometric_row_direct(p_row: &[f64], target: usize) -> Vec<f64> {
    let len = p_row.len();
    let order = closeness_order(target, len);
    let mut out = vec![0.0; len];
    for (pos, &j) in order.iter().enumerate() {
        out[j] = order[..pos].iter().fold(p_row[j], |acc, &k| acc * (1.0 - p_row[k]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ordering_examples() {
        // 1-based (3, 5) -> [4, 2, 5, 1]
        assert_eq!(closeness_order(2, 5), vec![3, 1, 4, 0]);
        assert_eq!(closeness_order(0, 5), vec![1, 2, 3, 4]);
        assert_eq!(closeness_order(4, 5), vec![3, 2, 1, 0]);
        assert!(closeness_order(0, 1).is_empty());
    }

    #[test]
    fn three_source_hand_example() {
        // N=3, i=2 (1-based), P row [0.5, -, 0.5]: right neighbour first.
        let p: [f64; 9] = [0.0, 0.0, 0.0, 0.5, 0.3, 0.5, 0.0, 0.0, 0.0];
        let a = geometric_weights(&p, 3).unwrap();
        assert!((a[3 + 2] - 0.5).abs() < 1e-15);
        assert!((a[3] - 0.25).abs() < 1e-15);
        assert_eq!(a[3 + 1], 0.0);
    }

    #[test]
    fn single_certain_source_takes_all_mass() {
        let p = [0.0, 1.0, 0.0, 0.0];
        let a = geometric_weights(&p, 2).unwrap();
        assert_eq!(a[1], 1.0);
    }

    #[test]
    fn tie_break_shadowing() {
        let p_val: f64 = 0.3;
        let mut p = vec![0.0f64; 25];
        p[2 * 5 + 3] = p_val;
        p[2 * 5 + 1] = p_val;
        let a = geometric_weights(&p, 5).unwrap();
        assert!((a[2 * 5 + 3] - p_val).abs() < 1e-15);
        assert!((a[2 * 5 + 1] - p_val * (1.0 - p_val)).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_probability_is_a_domain_error() {
        assert!(matches!(geometric_weights(&[0.0, 1.5, 0.0, 0.0], 2), Err(Error::Domain(_))));
        assert!(matches!(geometric_weights(&[0.0, f64::NAN, 0.0, 0.0], 2), Err(Error::Domain(_))));
    }

    #[test]
    fn logits_path_matches_probability_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 6;
        let z: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let p: Vec<f64> = z.iter().map(|&x| sigmoid(x)).collect();
        let expect = geometric_weights(&p, n).unwrap();
        let mut t = Tape::new();
        let zv = t.constant(Tensor::new(&[1, 1, n, n], z).unwrap());
        let a = geometric_from_logits(&mut t, zv, &[true; 6], 1, n).unwrap();
        for (i, (x, y)) in t.value(a).iter().zip(&expect).enumerate() {
            if i % (n + 1) == 0 {
                assert_eq!(*x, 0.0);
            } else {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_sources_get_no_weight_and_cast_no_shadow() {
        let n = 5;
        let z = vec![2.0; n * n];
        let valid = [true, true, false, true, false];
        let mut t = Tape::<f64>::new();
        let zv = t.leaf(Tensor::new(&[1, 1, n, n], z).unwrap(), true);
        let a = geometric_from_logits(&mut t, zv, &valid, 1, n).unwrap();
        let av = t.value(a).to_vec();
        // Row 1: order 2(pad), 0, 3, 4(pad) -> 0 is first real source.
        let p = sigmoid(2.0);
        assert!((av[n] - p).abs() < 1e-15);
        assert!((av[n + 3] - p * (1.0 - p)).abs() < 1e-15);
        for i in 0..n {
            assert_eq!(av[i * n + 2], 0.0);
            assert_eq!(av[i * n + 4], 0.0);
        }
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        let dz = g.get(zv).unwrap();
        for i in 0..n {
            assert_eq!(dz[i * n + 2], 0.0);
            assert_eq!(dz[i * n + 4], 0.0);
        }
    }

    #[test]
    fn weights_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, h, n) = (2, 2, 5);
        let point: Vec<f64> = (0..b * h * n * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let proj: Vec<f64> = (0..point.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let valid = [true, true, true, true, true, true, true, true, false, false];
        let f = |x: &[f64]| {
            let mut t = Tape::new();
            let z = t.leaf(Tensor::new(&[b, h, n, n], x.to_vec())?, true);
            let a = geometric_from_logits(&mut t, z, &valid, b, n)?;
            let w = t.constant(Tensor::new(&[b, h, n, n], proj.clone())?);
            let m = t.mul(a, w)?;
            let loss = t.sum(m);
            let v = t.value(loss)[0];
            let g = t.backward(loss)?;
            Ok((v, g.get(z).unwrap().to_vec()))
        };
        let r = grad_check(f, &point, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
