//! Central-difference gradient verification.

/// Perturbation used for central differences.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Worst relative error between an analytic gradient and the central
/// difference of `loss` over every coordinate of `theta`.
///
/// The error at coordinate `i` is `|a - n| / max(|a| + |n|, 1e-4)`; the
/// floor keeps finite-difference noise on near-zero gradients from
/// registering as failures.
pub fn central_diff_error(
    mut loss: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
) -> f64 {
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    let mut work = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + GRADCHECK_STEP;
        let plus = loss(&work);
        work[i] = orig - GRADCHECK_STEP;
        let minus = loss(&work);
        work[i] = orig;
        let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-4);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_closure_is_exact() {
        let w = [2.0, -3.0, 0.5];
        let loss = |t: &[f64]| t.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let theta = [1.0, 2.0, 3.0];
        let err = central_diff_error(loss, &theta, &w);
        assert!(err < 1e-9, "linear closure error {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let loss = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>();
        let theta = [1.0, -2.0];
        let analytic = [2.0 * 1.0 * 2.0, 2.0 * -2.0]; // first entry doubled
        let err = central_diff_error(loss, &theta, &analytic);
        assert!(err > 1e-2, "corruption must register, got {err}");
    }
}
