//! Finite-difference gradient oracle.
//!
//! Central differences are compared against analytic gradients with a
//! relative error whose denominator is floored at [`REL_ERROR_FLOOR`], so
//! coordinates whose true gradient is numerically zero are judged on an
//! absolute scale. Functions with kinks (ReLU, argmin, argmax) report a
//! signature of their discrete choices; coordinates whose perturbation
//! changes the signature straddle a kink and are skipped.

use super::params::Parameters;

pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

/// Compares `analytic` against central differences of `f` at every
/// coordinate of `params`.
///
/// `f` returns the scalar objective together with a signature of every
/// discrete decision taken while computing it.
pub fn check_parameters<P, S, F>(params: &P, analytic: &P, h: f64, mut f: F) -> GradCheckReport
where
    P: Parameters + Clone,
    S: PartialEq,
    F: FnMut(&P) -> (f64, S),
{
    let (_, base_sig) = f(params);
    let analytic_blocks: Vec<(String, Vec<f64>)> = analytic
        .blocks()
        .into_iter()
        .map(|(n, b)| (n, b.to_vec()))
        .collect();
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (bi, (name, grads)) in analytic_blocks.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let original = work.blocks()[bi].1[j];
            work.blocks_mut()[bi].1[j] = original + h;
            let (up, up_sig) = f(&work);
            work.blocks_mut()[bi].1[j] = original - h;
            let (down, down_sig) = f(&work);
            work.blocks_mut()[bi].1[j] = original;
            if up_sig != base_sig || down_sig != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), j, a, numeric));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let g = finite_difference_gradient(|x| x[0] * x[0], &[3.0], 1e-3);
        assert!((g[0] - 6.0).abs() < 1e-5);
    }

    #[test]
    fn constant() {
        let g = finite_difference_gradient(|_| 4.2, &[1.0, -2.0, 0.5], 1e-3);
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear() {
        let g = finite_difference_gradient(|x| x[0] * x[1], &[2.0, 5.0], 1e-3);
        assert!((g[0] - 5.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn check_parameters_flags_a_wrong_gradient() {
        let x = vec![1.0, 2.0];
        let good = vec![2.0, 4.0];
        let bad = vec![2.0, 5.0];
        let f = |p: &Vec<f64>| (p.iter().map(|v| v * v).sum::<f64>(), ());
        assert!(check_parameters(&x, &good, 1e-5, f).passes(1e-4));
        assert!(!check_parameters(&x, &bad, 1e-5, f).passes(1e-4));
    }

    #[test]
    fn kinks_are_skipped() {
        let x = vec![0.0];
        let analytic = vec![1.0];
        let report = check_parameters(&x, &analytic, 1e-5, |p: &Vec<f64>| {
            (p[0].max(0.0), p[0] > 0.0)
        });
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 0);
    }
}
