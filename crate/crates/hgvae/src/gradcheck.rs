//! Central finite-difference gradient checking.
//!
//! The checker knows nothing about the tape: it perturbs a flat input
//! vector and re-runs a caller-supplied scalar forward function, so it
//! stays independent of the reverse-mode path it is used to validate.

use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: Real,
    /// Maximum allowed relative error between analytic and numerical.
    pub rel_tol: Real,
    /// Entries where both gradients are below this magnitude are compared
    /// absolutely instead (relative error is meaningless near zero).
    pub zero_band: Real,
    /// Absolute tolerance inside the zero band.
    pub abs_tol: Real,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            rel_tol: 1e-4,
            zero_band: 1e-6,
            abs_tol: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    pub worst_index: usize,
    pub analytic_at_worst: Real,
    pub numeric_at_worst: Real,
    pub ok: bool,
}

/// Compare an analytic gradient against central finite differences of
/// `f`, evaluated around `x`.
pub fn check_gradient(
    x: &[Real],
    analytic: &[Real],
    cfg: &GradCheckConfig,
    mut f: impl FnMut(&[Real]) -> Real,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut xs = x.to_vec();
    let mut max_rel: Real = 0.0;
    let mut worst = 0usize;
    let mut worst_pair = (0.0, 0.0);
    let mut ok = true;
    for i in 0..xs.len() {
        let orig = xs[i];
        xs[i] = orig + cfg.epsilon;
        let fp = f(&xs);
        xs[i] = orig - cfg.epsilon;
        let fm = f(&xs);
        xs[i] = orig;
        let num = (fp - fm) / (2.0 * cfg.epsilon);
        let ana = analytic[i];
        let scale = ana.abs().max(num.abs());
        if scale < cfg.zero_band {
            if (ana - num).abs() > cfg.abs_tol {
                ok = false;
                worst = i;
                worst_pair = (ana, num);
                max_rel = Real::INFINITY;
            }
            continue;
        }
        let rel = (ana - num).abs() / scale;
        if rel > max_rel {
            max_rel = rel;
            worst = i;
            worst_pair = (ana, num);
        }
        if rel > cfg.rel_tol {
            ok = false;
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        worst_index: worst,
        analytic_at_worst: worst_pair.0,
        numeric_at_worst: worst_pair.1,
        ok,
    }
}

/// Panic with a readable report unless the analytic gradient matches
/// finite differences of `f` at `x`.
pub fn assert_gradients_match(
    what: &str,
    x: &[Real],
    analytic: &[Real],
    f: impl FnMut(&[Real]) -> Real,
) {
    let cfg = GradCheckConfig::default();
    let report = check_gradient(x, analytic, &cfg, f);
    assert!(
        report.ok,
        "{what}: gradient check failed at index {} (analytic {:.6e}, numeric {:.6e}, max rel err {:.3e})",
        report.worst_index, report.analytic_at_worst, report.numeric_at_worst, report.max_rel_error
    );
}
