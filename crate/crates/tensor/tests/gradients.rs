//! Every primitive's adjoint against central differences (step 1e-5, f64,
//! inputs in [-1, 1]).

use ldca_tensor::suite::{primitive_checks, uniform};
use ldca_tensor::{grad_check, GradCheckConfig, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    let suite = primitive_checks().unwrap();
    assert!(suite.checks.len() >= 40);
    for c in &suite.checks {
        let r = &c.report;
        assert!(
            r.passed,
            "{}: max rel error {:e} at {} (analytic {}, numeric {})",
            c.name, r.max_rel_error, r.worst_index, r.analytic, r.numeric
        );
    }
}

#[test]
fn grad_check_examples() {
    let x = uniform(&[10], 70);
    let report = grad_check(|t, x| t.sum(x), &x, &GradCheckConfig::with_tol(1e-10)).unwrap();
    assert!(report.passed, "{report:?}");

    let g = Tensor::ones(&[5]);
    let b = Tensor::zeros(&[5]);
    let z = uniform(&[3, 5], 71);
    let report = grad_check(
        |t, x| {
            let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
            let y = t.layer_norm(x, g, b)?;
            let w = t.constant(uniform(&[3, 5], 72));
            let y = t.mul(y, w)?;
            let s = t.square(y)?;
            t.sum(s)
        },
        &z,
        &GradCheckConfig::with_tol(1e-4),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");

    // sin with a deliberately wrong derivative
    let report = grad_check(
        |t, x| {
            let y = t.map(x, f64::sin, |v| v.cos() * 1.5)?;
            t.sum(y)
        },
        &x,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed);
}
