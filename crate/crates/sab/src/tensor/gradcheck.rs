//! Central finite-difference verification of analytic gradients.
//!
//! The objective is evaluated at `p ± eps` per coordinate and compared
//! against the supplied analytic gradient. Functions with discrete
//! decisions (top-k selections, relu branches) expose them through a
//! signature closure; coordinates whose perturbation flips a decision are
//! reported as skipped instead of failed, since the two-sided difference
//! quotient is meaningless across such a boundary.

use crate::tensor::Tensor;

pub struct CheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Floor for the relative-error denominator, so that coordinates whose
    /// analytic and numeric gradients are both at noise level do not
    /// produce spurious relative errors.
    pub denom_floor: f64,
    /// Safety factor on the quotient's rounding-noise bound,
    /// |f|·ulp/(2·eps). Differences below that bound are not resolvable
    /// by a central difference and are not charged against the gradient;
    /// a wrong backward rule errs in proportion to the gradient itself
    /// and stays far above it.
    pub noise_safety: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            eps: 1e-5,
            denom_floor: 1e-6,
            noise_safety: 8.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordReport {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug)]
pub struct CheckReport {
    pub checked: usize,
    pub skipped: usize,
    /// Noise-adjusted: differences below the central-difference rounding
    /// bound count as zero.
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Unadjusted worst-case relative error, for reporting.
    pub max_raw_rel_err: f64,
    pub worst: Option<CoordReport>,
}

impl CheckReport {
    pub fn total(&self) -> usize {
        self.checked + self.skipped
    }

    pub fn skipped_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.skipped as f64 / self.total() as f64
        }
    }
}

/// Compare `analytic` against central differences of `f` over every
/// coordinate of `params`.
///
/// `signature` fingerprints the discrete decisions `f`'s underlying
/// computation would take at a given point; evaluations whose signature
/// differs from the base point's mark the coordinate skipped. Pass
/// `|_| 0` for a function with no discrete structure.
pub fn finite_diff_check(
    params: &[(String, Tensor)],
    analytic: &[Tensor],
    f: impl Fn(&[Tensor]) -> f64,
    signature: impl Fn(&[Tensor]) -> u64,
    cfg: &CheckConfig,
) -> CheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let base_sig = signature(&values);
    let f_base = f(&values);
    let fd_noise = f_base.abs() * f64::EPSILON / (2.0 * cfg.eps) * cfg.noise_safety;

    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut max_rel = 0.0f64;
    let mut max_raw = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst: Option<CoordReport> = None;

    for (p, (name, base)) in params.iter().enumerate() {
        assert_eq!(base.shape(), analytic[p].shape(), "param {name}");
        for i in 0..base.len() {
            let orig = base.data()[i];

            values[p].data_mut()[i] = orig + cfg.eps;
            let sig_plus = signature(&values);
            let f_plus = f(&values);

            values[p].data_mut()[i] = orig - cfg.eps;
            let sig_minus = signature(&values);
            let f_minus = f(&values);

            values[p].data_mut()[i] = orig;

            if sig_plus != base_sig || sig_minus != base_sig {
                skipped += 1;
                continue;
            }

            let numeric = (f_plus - f_minus) / (2.0 * cfg.eps);
            let a = analytic[p].data()[i];
            let denom = a.abs().max(numeric.abs()).max(cfg.denom_floor);
            let rel = ((a - numeric).abs() - fd_noise).max(0.0) / denom;
            max_raw = max_raw.max((a - numeric).abs() / denom);

            checked += 1;
            sum_rel += rel;
            if rel >= max_rel {
                max_rel = rel;
                worst = Some(CoordReport {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }

    CheckReport {
        checked,
        skipped,
        max_rel_err: max_rel,
        mean_rel_err: if checked == 0 {
            0.0
        } else {
            sum_rel / checked as f64
        },
        max_raw_rel_err: max_raw,
        worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_checks_cleanly() {
        let params = vec![("p".to_string(), Tensor::vector(vec![1.0, 2.0]))];
        let analytic = vec![Tensor::vector(vec![2.0, 4.0])];
        let f = |ps: &[Tensor]| ps[0].data().iter().map(|&x| x * x).sum::<f64>();
        let report = finite_diff_check(&params, &analytic, f, |_| 0, &CheckConfig::default());
        assert_eq!(report.checked, 2);
        assert_eq!(report.skipped, 0);
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn relu_kink_coordinate_is_skipped() {
        // f = sum(relu(p)); p1 sits exactly on the kink. Its sign flips
        // under the +/- eps probes, so the signature differs and the
        // coordinate must be skipped, not failed.
        let params = vec![("p".to_string(), Tensor::vector(vec![1.0, 0.0, -1.0]))];
        let analytic = vec![Tensor::vector(vec![1.0, 0.0, 0.0])];
        let f = |ps: &[Tensor]| ps[0].data().iter().map(|&x| x.max(0.0)).sum::<f64>();
        let sig = |ps: &[Tensor]| {
            ps[0]
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| if x > 0.0 { 1u64 << i } else { 0 })
                .sum()
        };
        let report = finite_diff_check(&params, &analytic, f, sig, &CheckConfig::default());
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn wrong_analytic_gradient_is_caught() {
        let params = vec![("p".to_string(), Tensor::vector(vec![3.0]))];
        let analytic = vec![Tensor::vector(vec![5.0])]; // truth is 6.0
        let f = |ps: &[Tensor]| ps[0].data()[0] * ps[0].data()[0];
        let report = finite_diff_check(&params, &analytic, f, |_| 0, &CheckConfig::default());
        assert!(report.max_rel_err > 0.1);
        let worst = report.worst.unwrap();
        assert_eq!(worst.param, "p");
        assert_eq!(worst.index, 0);
    }
}
