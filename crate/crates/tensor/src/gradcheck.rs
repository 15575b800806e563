//! Central-difference verification of tape adjoints.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true derivative is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many coordinates, evenly strided; `None` checks all.
    pub max_probes: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_probes: None,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckConfig {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape adjoints of the scalar program `f` at `x` against central
/// differences.
pub fn grad_check<F>(f: F, x: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let root = f(&mut tape, xv)?;
    if tape.value(root).len() != 1 {
        return Err(TensorError::Usage(
            "grad_check needs a scalar program".into(),
        ));
    }
    tape.backward(root)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let n = x.len();
    let stride = cfg.max_probes.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
        tol: cfg.tol,
        passed: true,
    };
    for i in (0..n).step_by(stride) {
        let mut plus = x.clone();
        plus.data_mut()[i] += cfg.step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= cfg.step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * cfg.step);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric, cfg.floor);
        report.probes += 1;
        if err > report.max_rel_error || report.probes == 1 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error < cfg.tol;
    Ok(report)
}
