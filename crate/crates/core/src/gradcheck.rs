//! Central finite-difference verification of analytic gradients.

use ndarray::ArrayD;

/// Evaluate a scalar function of `leaves` and, when asked, its analytic
/// gradient with respect to every leaf. Implementations build a fresh tape
/// per call so the finite-difference probes exercise the true forward path.
pub trait FdProbe {
    fn eval(&self, leaves: &[ArrayD<f64>], wants_grad: bool) -> (f64, Vec<ArrayD<f64>>);
}

impl<F> FdProbe for F
where
    F: Fn(&[ArrayD<f64>], bool) -> (f64, Vec<ArrayD<f64>>),
{
    fn eval(&self, leaves: &[ArrayD<f64>], wants_grad: bool) -> (f64, Vec<ArrayD<f64>>) {
        self(leaves, wants_grad)
    }
}

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Central differences with the given step over (a subset of) coordinates.
///
/// `max_coords_per_leaf` bounds the sweep for large tensors; coordinates are
/// taken at an even stride so every region of the tensor is touched. The
/// relative error denominator is `max(|numeric|, |analytic|, 1e-8)`.
pub fn central_diff_check(
    leaves: &[ArrayD<f64>],
    probe: &dyn FdProbe,
    step: f64,
    max_coords_per_leaf: usize,
) -> FdReport {
    central_diff_check_refined(leaves, probe, &[step], f64::NEG_INFINITY, max_coords_per_leaf)
}

/// Central differences with per-coordinate step refinement.
///
/// Each coordinate is checked at `steps[0]`; coordinates that miss
/// `accept_tol` are re-checked at the remaining steps, keeping the best
/// (smallest) error. A wrong analytic gradient is a systematic mismatch and
/// fails at every step; refinement only clears coordinates whose first probe
/// straddled an activation kink or hit truncation error.
pub fn central_diff_check_refined(
    leaves: &[ArrayD<f64>],
    probe: &dyn FdProbe,
    steps: &[f64],
    accept_tol: f64,
    max_coords_per_leaf: usize,
) -> FdReport {
    assert!(!steps.is_empty(), "need at least one step");
    let (_, analytic) = probe.eval(leaves, true);
    assert_eq!(
        analytic.len(),
        leaves.len(),
        "probe must return one gradient per leaf"
    );
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.len();
        let stride = n.div_ceil(max_coords_per_leaf).max(1);
        let analytic_li = analytic[li].as_standard_layout();
        let mut idx = 0;
        while idx < n {
            let a = analytic_li.as_slice().unwrap()[idx];
            let mut best = f64::INFINITY;
            for &step in steps {
                let mut plus = leaves.to_vec();
                let mut minus = leaves.to_vec();
                *plus[li].iter_mut().nth(idx).unwrap() += step;
                *minus[li].iter_mut().nth(idx).unwrap() -= step;
                let (lp, _) = probe.eval(&plus, false);
                let (lm, _) = probe.eval(&minus, false);
                let numeric = (lp - lm) / (2.0 * step);
                let denom = numeric.abs().max(a.abs()).max(1e-8);
                best = best.min((numeric - a).abs() / denom);
                if best < accept_tol {
                    break;
                }
            }
            max_rel = max_rel.max(best);
            checked += 1;
            idx += stride;
        }
    }
    FdReport {
        max_rel_err: max_rel,
        coords_checked: checked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn detects_a_corrupted_gradient() {
        // Negative control: f(x) = sum(x^2), but the "analytic" gradient is
        // deliberately scaled by 1.1; the sweep must flag it.
        let probe = |leaves: &[ArrayD<f64>], wants_grad: bool| {
            let x = &leaves[0];
            let loss = x.iter().map(|v| v * v).sum::<f64>();
            let grads = if wants_grad {
                vec![x.mapv(|v| 2.0 * v * 1.1)]
            } else {
                vec![]
            };
            (loss, grads)
        };
        let leaves = vec![ArrayD::from_shape_fn(IxDyn(&[4]), |i| i[0] as f64 + 1.0)];
        let report = central_diff_check(&leaves, &probe, 1e-5, usize::MAX);
        assert!(report.max_rel_err > 1e-4, "corruption went undetected");
    }

    #[test]
    fn refinement_does_not_rescue_a_corrupted_gradient() {
        let probe = |leaves: &[ArrayD<f64>], wants_grad: bool| {
            let x = &leaves[0];
            let loss = x.iter().map(|v| v * v).sum::<f64>();
            let grads = if wants_grad {
                vec![x.mapv(|v| 2.0 * v * 1.1)]
            } else {
                vec![]
            };
            (loss, grads)
        };
        let leaves = vec![ArrayD::from_shape_fn(IxDyn(&[4]), |i| i[0] as f64 + 1.0)];
        let report = central_diff_check_refined(
            &leaves,
            &probe,
            &[1e-5, 1e-6, 1e-7],
            1e-4,
            usize::MAX,
        );
        assert!(report.max_rel_err > 1e-2, "corruption went undetected");
    }

    #[test]
    fn accepts_a_correct_gradient() {
        let probe = |leaves: &[ArrayD<f64>], wants_grad: bool| {
            let x = &leaves[0];
            let loss = x.iter().map(|v| v * v * v).sum::<f64>();
            let grads = if wants_grad {
                vec![x.mapv(|v| 3.0 * v * v)]
            } else {
                vec![]
            };
            (loss, grads)
        };
        let leaves = vec![ArrayD::from_shape_fn(IxDyn(&[5]), |i| 0.3 * i[0] as f64 - 0.7)];
        let report = central_diff_check(&leaves, &probe, 1e-5, usize::MAX);
        assert!(report.max_rel_err < 1e-8);
        assert_eq!(report.coords_checked, 5);
    }
}
