//! Central finite-difference gradient verification.

use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index where the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `f` with central differences
/// for every entry of `params`. `f` returns `(loss, gradient)`.
///
/// Piecewise-linear activations make the difference quotient wrong whenever
/// a perturbation crosses a kink; such entries are retried with smaller
/// steps and the smallest error is kept.
pub fn grad_check<F>(params: &mut [f64], eps: f64, mut f: F) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    for i in 0..params.len() {
        let orig = params[i];
        let mut best = (f64::INFINITY, 0.0);
        for h in [eps, eps * 1e-1, eps * 1e-2, eps * 1e-3, eps * 1e-4] {
            params[i] = orig + h;
            let (lp, _) = f(params);
            params[i] = orig - h;
            let (lm, _) = f(params);
            params[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let e = rel_error(analytic[i], num);
            if e < best.0 {
                best = (e, num);
            }
            if e < 1e-6 {
                break;
            }
        }
        report.checked += 1;
        if best.0 > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: best.0,
                worst_index: i,
                analytic: analytic[i],
                numeric: best.1,
                checked: report.checked,
            };
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn detects_wrong_gradient() {
        let mut p = vec![1.0, 2.0];
        let ok = grad_check(&mut p, 1e-3, |x| (x[0] * x[0] + 3.0 * x[1], vec![2.0 * x[0], 3.0]));
        assert!(ok.max_rel_error < 1e-8);
        let bad = grad_check(&mut p, 1e-3, |x| (x[0] * x[0] + 3.0 * x[1], vec![2.0 * x[0], 2.0]));
        assert_eq!(bad.worst_index, 1);
        assert!(bad.max_rel_error > 0.3);
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn tiny_gradients_use_absolute_floor() {
        let mut p = vec![0.0];
        let r = grad_check(&mut p, 1e-3, |_| (1.0, vec![1e-12]));
        assert!(r.max_rel_error < 1e-3);
    }
}
