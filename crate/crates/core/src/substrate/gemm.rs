use super::Real;
use crate::par;

/// Below this many multiply-adds a product is not worth splitting.
const PAR_MIN_FLOPS: usize = 1 << 16;

/// Row-major matrix product `c (+)= op(a) · op(b)` with `c: m×n`.
///
/// `a` holds `m×k` (or `k×m` when `trans_a`), `b` holds `k×n` (or `n×k` when
/// `trans_b`). With `accumulate` the product is added to `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    trans_a: bool,
    b: &[S],
    trans_b: bool,
    c: &mut [S],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { S::one() } else { S::zero() };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let run = |r0: usize, rows: usize, c_chunk: &mut [S]| {
        let (a_off, rsa, csa) = if trans_a {
            (r0, 1, m as isize)
        } else {
            (r0 * k, k as isize, 1)
        };
        let a_view = if k == 0 { a } else { &a[a_off..] };
        S::gemm_raw(
            rows, k, n, S::one(), a_view, rsa, csa, b, rsb, csb, beta, c_chunk, n as isize, 1,
        );
    };
    let flops = m * k * n;
    if !par::enabled() || flops < PAR_MIN_FLOPS || m < 2 {
        run(0, m, c);
        return;
    }
    // Row blocks sized so every block carries a reasonable share of the work.
    let block = ((PAR_MIN_FLOPS / (k * n).max(1)).max(8)).min(m);
    par::for_each_chunk_mut(c, block * n, |ci, chunk| {
        run(ci * block, chunk.len() / n, chunk);
    });
}
