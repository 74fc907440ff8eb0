use crate::error::{Error, Result};
use crate::par;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates too small relative to the largest gradient to be
    /// resolved by finite differences; excluded from `max_rel_error`.
    pub skipped: usize,
}

/// Coordinates with `|a| + |n|` below this fraction of the largest one are
/// treated as zero.
pub const RESOLUTION: f64 = 1e-6;

/// Number of step sizes tried per coordinate, each a tenth of the previous.
const STEP_DECADES: usize = 3;

/// Compares the analytic gradient of `f` at `point` against fourth-order
/// central differences, coordinate by coordinate. Steps from `step` down
/// to `step / 100` are tried and the most self-consistent estimate kept.
///
/// `f` returns the function value and its analytic gradient. The error of
/// one coordinate is `|a - n| / (|a| + |n| + 1e-12)`, taken over the
/// coordinates above [`RESOLUTION`].
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync + Send,
{
    grad_check_split(|x| Ok(f(x)?.0), &f, point, step)
}

/// [`grad_check`] with a separate value-only function for the many
/// perturbed evaluations.
pub fn grad_check_split<V, F>(value_fn: V, f: F, point: &[f64], step: f64) -> Result<GradCheck>
where
    V: Fn(&[f64]) -> Result<f64> + Sync + Send,
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("function value {value} at the check point")));
    }
    if analytic.len() != point.len() {
        return Err(Error::shape("grad_check", &[point.len()], &[analytic.len()]));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("analytic gradient at coordinate {i}")));
    }
    let numeric = par::map_range(point.len(), |i| -> Result<f64> {
        let mut x = point.to_vec();
        let mut diff = |h: f64| -> Result<f64> {
            let mut at = |offset: f64| -> Result<f64> {
                x[i] = point[i] + offset;
                value_fn(&x)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
        };
        // Large steps suffer near kinks, small ones from rounding: keep the
        // estimate that agrees best with the one at half its step.
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..STEP_DECADES {
            let h = step * 10f64.powi(-(k as i32));
            let (coarse, fine) = (diff(h)?, diff(h / 2.0)?);
            let spread = (coarse - fine).abs();
            if spread < best.0 || !best.0.is_finite() {
                best = (spread, fine);
            }
        }
        let d = best.1;
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Error::NonFinite(format!("finite difference at coordinate {i}")))
        }
    });
    let numeric = numeric.into_iter().collect::<Result<Vec<f64>>>()?;
    let scale = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| a.abs() + n.abs())
        .fold(0.0, f64::max);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        skipped: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if a.abs() + n.abs() < RESOLUTION * scale {
            report.skipped += 1;
            continue;
        }
        let err = (a - n).abs() / (a.abs() + n.abs() + 1e-12);
        if err > report.max_rel_error {
            report = GradCheck {
                max_rel_error: err,
                worst: i,
                analytic: *a,
                numeric: n,
                skipped: report.skipped,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_like_function_has_no_error() {
        // f(x) = sum(x): gradient all ones, differences exact.
        let r = grad_check(|x| Ok((x.iter().sum(), vec![1.0; x.len()])), &[0.3, -1.2, 4.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let r = grad_check(|x| Ok((x[0] * x[0], vec![x[0]])), &[2.0], 1e-5).unwrap();
        assert!(r.max_rel_error > 0.3);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let r = grad_check(|x| Ok((x[0].ln(), vec![1.0 / x[0]])), &[0.0], 1e-5);
        assert!(r.is_err());
    }
}
