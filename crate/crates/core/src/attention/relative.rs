//! Sinusoidal position tables and relative/absolute positional scores.

use crate::substrate::{Real, Tensor};

/// Standard sinusoidal embedding of a (possibly negative) position:
/// `sin(pos / 10000^(2k/d))` on even channels, `cos` on odd ones.
pub fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let k = (c / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * k / d as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Rows `p_0 .. p_{len-1}`.
pub fn absolute_table<S: Real>(len: usize, d: usize) -> Tensor<S> {
    let data = (0..len).flat_map(|i| sinusoid(i as f64, d)).map(S::of).collect();
    Tensor::new(&[len, d], data).expect("table size")
}

/// Rows for offsets `-(len-1) ..= len-1`; offset `o` lives at row `o + len - 1`.
pub fn offset_table<S: Real>(len: usize, d: usize) -> Tensor<S> {
    let rows = 2 * len - 1;
    let data = (0..rows)
        .flat_map(|r| sinusoid(r as f64 - (len as f64 - 1.0), d))
        .map(S::of)
        .collect();
    Tensor::new(&[rows, d], data).expect("table size")
}

/// Gather index turning a `len × (2len-1)` offset score table into
/// `len × len` scores for offset `i - j`.
pub fn offset_index(len: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(len * len);
    for i in 0..len {
        for j in 0..len {
            idx.push(i + len - 1 - j);
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_at_zero_alternates_zero_one() {
        let p = sinusoid(0.0, 6);
        assert_eq!(p, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn offset_table_rows_match_direct_evaluation() {
        let t = offset_table::<f64>(4, 8);
        assert_eq!(t.shape(), &[7, 8]);
        assert_eq!(&t.data()[0..8], sinusoid(-3.0, 8).as_slice());
        assert_eq!(&t.data()[3 * 8..4 * 8], sinusoid(0.0, 8).as_slice());
        let idx = offset_index(4);
        // i=1, j=3 -> offset -2 -> row 1
        assert_eq!(idx[4 + 3], 1);
    }
}
