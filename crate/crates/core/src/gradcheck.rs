//! Central finite-difference gradient verification.
//!
//! The checker only ever evaluates the forward pass, so it is independent of
//! the backward implementation it validates: it perturbs each parameter
//! component by ±step, re-runs the closure on a fresh tape, and compares the
//! central difference against the analytic gradient.

use crate::error::Result;
use crate::optim::{BoundParams, ParamSet};
use crate::tape::{Tape, Var};

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter name, flat index) of the worst component.
    pub worst: Option<(String, usize)>,
    pub components: usize,
}

/// Relative error with an absolute floor for near-zero gradients.
fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-6 {
        // both effectively zero: compare absolutely
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Compare analytic gradients of `f` against central finite differences over
/// every component of every non-frozen parameter.
pub fn finite_diff_check<F>(params: &ParamSet, f: F, step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    tape.backward(loss)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        f(&tape, &bound)?.item()
    };

    let names: Vec<String> = params
        .names()
        .filter(|n| !params.is_frozen(n))
        .map(|s| s.to_string())
        .collect();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, components: 0 };
    for name in names {
        let grad = tape
            .grad(bound.var(&name)?)
            .expect("requires_grad leaf has gradient after backward");
        let n = grad.numel();
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&name)?.data_mut()[i] += step;
            let mut minus = params.clone();
            minus.get_mut(&name)?.data_mut()[i] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let err = rel_err(grad.data()[i], numeric);
            report.components += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Assert helper used across test suites.
pub fn assert_grads_match<F>(params: &ParamSet, f: F, step: f64, tol: f64)
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    let report = finite_diff_check(params, f, step).expect("gradient check evaluation failed");
    assert!(
        report.max_rel_err < tol,
        "gradient mismatch: max rel err {} at {:?} over {} components",
        report.max_rel_err,
        report.worst,
        report.components
    );
}
