//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output value and enough
//! information to push gradients back to its inputs. Nodes are created in
//! topological order, so the backward pass is a single reverse sweep.
//!
//! A tape and its values belong to one thread for the length of a
//! forward/backward pass. Kernels inside an op may still fan out over the
//! [`crate::par`] helpers.

use rand::Rng;

use super::gemm::gemm;
use super::tensor::{numel, Tensor};
use super::Real;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward pass runs outside the tape and whose
/// vector-Jacobian product is supplied by hand.
pub trait CustomOp<S: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Given the output gradient, return one gradient per input (`None` for
    /// inputs that receive nothing). `inputs` are the input values in the
    /// order they were recorded.
    fn backward(&self, grad_out: &[S], inputs: &[&[S]], output: &[S]) -> Vec<Option<Vec<S>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    LogSigmoid,
}

enum Op<S: Real> {
    Leaf,
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Binary(Binary, Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Unary(Unary, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        shared_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    CumSum(Var),
    MaskedFill(Var, Vec<bool>),
    GatherRows(Var, Vec<usize>),
    GatherLast {
        x: Var,
        index: Vec<usize>,
        index_rows: usize,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    SelectRows {
        keep: Vec<bool>,
        a: Var,
        b: Var,
    },
    Dropout(Var, Vec<S>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
    Custom(Vec<Var>, Box<dyn CustomOp<S>>),
}

struct Node<S: Real> {
    value: Vec<S>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<S>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.get(v)?;
        Tensor::new(&self.shapes[v.0], g.to_vec()).ok()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<S: Real> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Vec<S>, shape: Vec<usize>, requires_grad: bool, op: Op<S>) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, x: S) -> Var {
        self.constant(Tensor::scalar(x))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(value, shape.to_vec(), rg, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if perm.len() != in_shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &in_shape, perm));
        }
        let (value, out_shape) = permute_data(self.value(x), &in_shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(value, out_shape, rg, Op::Permute(x, perm.to_vec())))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let f = |x: S, y: S| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let value: Vec<S> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![S::zero(); numel(&out_shape)];
            let (ra, rb) = (bcast_strides(&sa, &out_shape), bcast_strides(&sb, &out_shape));
            for_each_bcast(&out_shape, &ra, &rb, |o, ia, ib| out[o] = f(va[ia], vb[ib]));
            out
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, out_shape, rg, Op::Binary(kind, a, b)))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(value, shape, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(value, shape, rg, Op::AddScalar(x))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.scale(x, -S::one());
        self.add_scalar(n, S::one())
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(S) -> S = match kind {
            Unary::Relu => |v| if v > S::zero() { v } else { S::zero() },
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => |v| v.tanh(),
            Unary::Exp => |v| v.exp(),
            Unary::Log => |v| v.ln(),
            Unary::LogSigmoid => log_sigmoid,
        };
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(value, shape, rg, Op::Unary(kind, x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::LogSigmoid, x)
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `b` is either 2-D (shared across every leading index of `a`) or has
    /// the same leading axes as `a`. `ta`/`tb` transpose the last two axes of
    /// the respective operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let groups: usize = lead.iter().product();
        let shared_b = sb.len() == 2 && !sa.is_empty() && (sa.len() > 2);
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return Err(err());
        }
        if shared_b && ta {
            return Err(Error::Unsupported("matmul: transposed lhs with shared rhs".into()));
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut value = vec![S::zero(); groups * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        if shared_b || groups == 1 {
            gemm(groups * m, k, n, va, ta, vb, tb, &mut value, false);
        } else {
            par::for_each_chunk_mut(&mut value, m * n, |g, c| {
                gemm(m, k, n, &va[g * m * k..(g + 1) * m * k], ta, &vb[g * k * n..(g + 1) * k * n], tb, c, false);
            });
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            out_shape,
            rg,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                shared_b: shared_b || groups == 1,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// `x · w + b` with `w: in×out` and `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- row-wise -------------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax", &shape, &[]))?;
        let mut value = self.value(x).to_vec();
        par::for_each_chunk_mut(&mut value, n.max(1) * 64, |_, chunk| {
            for row in chunk.chunks_mut(n.max(1)) {
                softmax_row(row);
            }
        });
        let rg = self.rg(&[x]);
        Ok(self.push(value, shape, rg, Op::Softmax(x)))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    /// A zero-variance row maps to `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let rows = numel(&shape) / d.max(1);
        let eps = S::of(LAYER_NORM_EPS);
        let dn = S::of(d as f64);
        let xv = self.value(x);
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / dn;
            let s = (var + eps).sqrt().recip();
            rstd[r] = s;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * s;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let value = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            shape,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Inclusive cumulative sum along the last axis.
    pub fn cumsum(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("cumsum", &shape, &[]))?;
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(n.max(1)) {
            let mut acc = S::zero();
            for v in row {
                acc = acc + *v;
                *v = acc;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, shape, rg, Op::CumSum(x)))
    }

    /// Replaces entries where `mask` is set with `fill`. Filled entries pass
    /// no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: S) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("masked_fill", self.shape(x), &[mask.len()]));
        }
        let value = self
            .value(x)
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(value, shape, rg, Op::MaskedFill(x, mask.to_vec())))
    }

    /// Selects rows of a 2-D `table` (embedding lookup, readout selection).
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", &shape, &[index.len()]));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", &shape, &[bad]));
        }
        let t = self.value(table);
        let mut value = Vec::with_capacity(index.len() * d);
        for &i in index {
            value.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(value, vec![index.len(), d], rg, Op::GatherRows(table, index.to_vec())))
    }

    /// `out[r, j] = x[r, index[r mod R, j]]` along the last axis, where the
    /// index table has `R` rows that repeat over the leading rows of `x`.
    pub fn gather_last(&mut self, x: Var, index: &[usize], index_rows: usize, width: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("gather_last", &shape, &[]))?;
        let rows = numel(&shape) / n.max(1);
        if index.len() != index_rows * width || index_rows == 0 || !rows.is_multiple_of(index_rows) || index.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather_last", &shape, &[index_rows, width]));
        }
        let xv = self.value(x);
        let mut value = vec![S::zero(); rows * width];
        for r in 0..rows {
            let ir = r % index_rows;
            for j in 0..width {
                value[r * width + j] = xv[r * n + index[ir * width + j]];
            }
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(width);
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            out_shape,
            rg,
            Op::GatherLast {
                x,
                index: index.to_vec(),
                index_rows,
            },
        ))
    }

    /// `x[..., start..start+len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("slice", &shape, &[]))?;
        if start + len > n {
            return Err(Error::shape("slice", &shape, &[start, len]));
        }
        let value: Vec<S> = self
            .value(x)
            .chunks(n.max(1))
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(value, out_shape, rg, Op::Slice { x, start }))
    }

    /// Splits the last axis into consecutive pieces of the given widths.
    pub fn split_last(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_last(x, start, w)?);
            start += w;
        }
        if Some(&start) != self.shape(x).last() {
            return Err(Error::shape("split", self.shape(x), widths));
        }
        Ok(out)
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat", &lead, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(value, shape, rg, Op::Concat(parts.to_vec())))
    }

    /// Row-wise choice: row `r` of the output is row `r` of `a` where
    /// `keep[r]`, else row `r` of `b`. Values are copied, not blended.
    pub fn select_rows(&mut self, keep: &[bool], a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) || shape.is_empty() {
            return Err(Error::shape("select_rows", &shape, self.shape(b)));
        }
        let d = *shape.last().unwrap();
        let rows = numel(&shape) / d.max(1);
        if keep.len() != rows {
            return Err(Error::shape("select_rows", &shape, &[keep.len()]));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = Vec::with_capacity(va.len());
        for (r, &k) in keep.iter().enumerate() {
            let src = if k { va } else { vb };
            value.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            shape,
            rg,
            Op::SelectRows {
                keep: keep.to_vec(),
                a,
                b,
            },
        ))
    }

    /// Inverted dropout. Callers only invoke this in training mode.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep_scale = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep_scale })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(value, shape, rg, Op::Dropout(x, mask)))
    }

    // ---- reductions -----------------------------------------------------

    /// Mean cross-entropy of `logits: B×C` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let c = shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::TargetOutOfRange { target: t, classes: c });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = S::zero();
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln() + mx;
            total = total + lse - row[t];
            softmax_row(row);
        }
        let value = vec![total / S::of(targets.len() as f64)];
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            vec![],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![s], vec![], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = S::of(self.value(x).len().max(1) as f64);
        let s = self.value(x).iter().copied().sum::<S>() / n;
        let rg = self.rg(&[x]);
        self.push(vec![s], vec![], rg, Op::Mean(x))
    }

    /// Records an externally computed op.
    pub fn custom(&mut self, inputs: &[Var], value: Vec<S>, shape: Vec<usize>, op: Box<dyn CustomOp<S>>) -> Result<Var> {
        if value.len() != numel(&shape) {
            return Err(Error::shape(op.name(), &shape, &[value.len()]));
        }
        let rg = self.rg(inputs);
        Ok(self.push(value, shape, rg, Op::Custom(inputs.to_vec(), op)))
    }

    // ---- backward -------------------------------------------------------

    /// Runs the reverse sweep from a scalar `loss`. May be called once per
    /// recorded graph; [`Tape::reset`] clears it for reuse.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.shape(loss).is_empty() && self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.node_backward(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        // Only keep gradients of differentiable nodes.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn node_backward(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, delta: Vec<S>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            debug_assert_eq!(delta.len(), self.nodes[v.0].value.len());
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e = *e + d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(g, &node.shape, &inv);
                acc(*x, back);
            }
            Op::Binary(kind, a, b) => {
                let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                let out = &node.shape;
                let need_a = na.requires_grad;
                let need_b = nb.requires_grad;
                if na.shape == nb.shape {
                    match kind {
                        Binary::Add => {
                            if need_a {
                                acc(*a, g.to_vec());
                            }
                            if need_b {
                                acc(*b, g.to_vec());
                            }
                        }
                        Binary::Sub => {
                            if need_a {
                                acc(*a, g.to_vec());
                            }
                            if need_b {
                                acc(*b, g.iter().map(|&v| -v).collect());
                            }
                        }
                        Binary::Mul => {
                            if need_a {
                                acc(*a, g.iter().zip(&nb.value).map(|(&x, &y)| x * y).collect());
                            }
                            if need_b {
                                acc(*b, g.iter().zip(&na.value).map(|(&x, &y)| x * y).collect());
                            }
                        }
                    }
                } else {
                    let ra = bcast_strides(&na.shape, out);
                    let rb = bcast_strides(&nb.shape, out);
                    let mut ga = vec![S::zero(); if need_a { na.value.len() } else { 0 }];
                    let mut gb = vec![S::zero(); if need_b { nb.value.len() } else { 0 }];
                    for_each_bcast(out, &ra, &rb, |o, ia, ib| {
                        let (da, db) = match kind {
                            Binary::Add => (g[o], g[o]),
                            Binary::Sub => (g[o], -g[o]),
                            Binary::Mul => (g[o] * nb.value[ib], g[o] * na.value[ia]),
                        };
                        if need_a {
                            ga[ia] = ga[ia] + da;
                        }
                        if need_b {
                            gb[ib] = gb[ib] + db;
                        }
                    });
                    if need_a {
                        acc(*a, ga);
                    }
                    if need_b {
                        acc(*b, gb);
                    }
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Unary(kind, x) => {
                let xv = &self.nodes[x.0].value;
                let y = &node.value;
                let d: Vec<S> = match kind {
                    Unary::Relu => g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                        .collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(&g, &y)| g * y * (S::one() - y)).collect(),
                    Unary::Tanh => g.iter().zip(y).map(|(&g, &y)| g * (S::one() - y * y)).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                    Unary::Log => g.iter().zip(xv).map(|(&g, &x)| g / x).collect(),
                    Unary::LogSigmoid => g.iter().zip(xv).map(|(&g, &x)| g * sigmoid(-x)).collect(),
                };
                acc(*x, d);
            }
            Op::MatMul { a, b, ta, tb, shared_b } => {
                let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                let sa = &na.shape;
                let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let n = node.shape[node.shape.len() - 1];
                let groups = if *shared_b { 1 } else { numel(&sa[..sa.len() - 2]) };
                let mm = if *shared_b { numel(sa) / k.max(1) } else { m };
                let (ta, tb) = (*ta, *tb);
                if na.requires_grad {
                    let mut ga = vec![S::zero(); na.value.len()];
                    let run = |gc: &[S], bv: &[S], out: &mut [S]| {
                        if ta {
                            gemm(k, n, mm, bv, tb, gc, true, out, false);
                        } else {
                            gemm(mm, n, k, gc, false, bv, !tb, out, false);
                        }
                    };
                    if groups == 1 {
                        run(g, &nb.value, &mut ga);
                    } else {
                        par::for_each_chunk_mut(&mut ga, m * k, |gi, out| {
                            run(&g[gi * m * n..(gi + 1) * m * n], &nb.value[gi * k * n..(gi + 1) * k * n], out);
                        });
                    }
                    acc(*a, ga);
                }
                if nb.requires_grad {
                    let mut gb = vec![S::zero(); nb.value.len()];
                    let run = |av: &[S], gc: &[S], out: &mut [S]| {
                        if tb {
                            gemm(n, mm, k, gc, true, av, ta, out, false);
                        } else {
                            gemm(k, mm, n, av, !ta, gc, false, out, false);
                        }
                    };
                    if groups == 1 {
                        run(&na.value, g, &mut gb);
                    } else {
                        par::for_each_chunk_mut(&mut gb, k * n, |gi, out| {
                            run(&na.value[gi * m * k..(gi + 1) * m * k], &g[gi * m * n..(gi + 1) * m * n], out);
                        });
                    }
                    acc(*b, gb);
                }
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().unwrap();
                let mut d = vec![S::zero(); g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let gv = &self.nodes[gain.0].value;
                let dn = S::of(d as f64);
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![S::zero(); g.len()];
                    for (r, &s) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let gr = &g[span.clone()];
                        let hr = &xhat[span.clone()];
                        let dh: Vec<S> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let m1 = dh.iter().copied().sum::<S>() / dn;
                        let m2 = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<S>() / dn;
                        for ((o, &dhv), &hv) in dx[span].iter_mut().zip(&dh).zip(hr) {
                            *o = s * (dhv - m1 - hv * m2);
                        }
                    }
                    acc(*x, dx);
                }
                if self.nodes[gain.0].requires_grad {
                    let mut dg = vec![S::zero(); d];
                    for (i, (&gv, &hv)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] = dg[i % d] + gv * hv;
                    }
                    acc(*gain, dg);
                }
                if self.nodes[bias.0].requires_grad {
                    let mut db = vec![S::zero(); d];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % d] = db[i % d] + gv;
                    }
                    acc(*bias, db);
                }
            }
            Op::CumSum(x) => {
                let n = *node.shape.last().unwrap();
                let mut d = g.to_vec();
                for row in d.chunks_mut(n.max(1)) {
                    let mut run = S::zero();
                    for v in row.iter_mut().rev() {
                        run = run + *v;
                        *v = run;
                    }
                }
                acc(*x, d);
            }
            Op::MaskedFill(x, mask) => {
                acc(*x, g.iter().zip(mask).map(|(&v, &m)| if m { S::zero() } else { v }).collect());
            }
            Op::GatherRows(table, index) => {
                let nt = &self.nodes[table.0];
                let d = nt.shape[1];
                let mut dt = vec![S::zero(); nt.value.len()];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] = dt[i * d + j] + g[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::GatherLast { x, index, index_rows } => {
                let nx = &self.nodes[x.0];
                let n = *nx.shape.last().unwrap();
                let width = *node.shape.last().unwrap();
                let rows = nx.value.len() / n;
                let mut dx = vec![S::zero(); nx.value.len()];
                for r in 0..rows {
                    let ir = r % index_rows;
                    for j in 0..width {
                        let t = r * n + index[ir * width + j];
                        dx[t] = dx[t] + g[r * width + j];
                    }
                }
                acc(*x, dx);
            }
            Op::Slice { x, start } => {
                let nx = &self.nodes[x.0];
                let n = *nx.shape.last().unwrap();
                let w = *node.shape.last().unwrap();
                let mut dx = vec![S::zero(); nx.value.len()];
                if w > 0 {
                    for (dr, gr) in dx.chunks_mut(n).zip(g.chunks(w)) {
                        dr[*start..*start + w].copy_from_slice(gr);
                    }
                }
                acc(*x, dx);
            }
            Op::Concat(parts) => {
                let total = *node.shape.last().unwrap();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = *self.nodes[p.0].shape.last().unwrap();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    acc(p, dp);
                    offset += w;
                }
            }
            Op::SelectRows { keep, a, b } => {
                let d = *node.shape.last().unwrap();
                let mut da = vec![S::zero(); g.len()];
                let mut db = vec![S::zero(); g.len()];
                for (r, &k) in keep.iter().enumerate() {
                    let dst = if k { &mut da } else { &mut db };
                    dst[r * d..(r + 1) * d].copy_from_slice(&g[r * d..(r + 1) * d]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Dropout(x, mask) => acc(*x, g.iter().zip(mask).map(|(&a, &b)| a * b).collect()),
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.nodes[logits.0].shape[1];
                let scale = g[0] / S::of(targets.len() as f64);
                let mut d: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] = d[r * c + t] - scale;
                }
                acc(*logits, d);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                acc(*x, vec![g[0] / S::of(n.max(1) as f64); n]);
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&[S]> = inputs.iter().map(|v| self.nodes[v.0].value.as_slice()).collect();
                let ds = op.backward(g, &ins, &node.value);
                for (&v, d) in inputs.iter().zip(ds) {
                    if let Some(d) = d {
                        acc(v, d);
                    }
                }
            }
        }
    }
}

pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `log σ(x)` without overflow for large `|x|`.
pub fn log_sigmoid<S: Real>(x: S) -> S {
    if x == S::neg_infinity() {
        return x;
    }
    x.min(S::zero()) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_row<S: Real>(row: &mut [S]) {
    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
    if mx == S::neg_infinity() {
        row.iter_mut().for_each(|v| *v = S::nan());
        return;
    }
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` viewed in `out` (right-aligned), 0 on broadcast axes.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let mut strides = vec![0; r];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + r - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let r = out.len();
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn permute_data<S: Copy>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<S>, Vec<usize>) {
    let r = shape.len();
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(data[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}
