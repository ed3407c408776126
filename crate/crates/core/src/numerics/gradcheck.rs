//! Central finite-difference verification of analytic gradients.

use super::graph::Graph;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Real;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / (1e-8 as Real).max(analytic.abs() + numeric.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub coords: Vec<usize>,
    pub analytic: Vec<Real>,
    pub numeric: Vec<Real>,
    pub rel_errors: Vec<Real>,
    pub max_rel_error: Real,
    pub tol: Real,
    pub passed: bool,
}

/// Compares `analytic[c]` against the central difference of `f` at each
/// coordinate in `coords`.
pub fn compare_gradient(
    mut f: impl FnMut(&Tensor) -> Result<Real>,
    x: &Tensor,
    analytic: &[Real],
    coords: &[usize],
    eps: Real,
    tol: Real,
) -> Result<GradReport> {
    if eps <= 0.0 {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    if analytic.len() != x.len() {
        return Err(Error::shape(
            "gradcheck",
            format!("{} analytic entries for {} coordinates", analytic.len(), x.len()),
        ));
    }
    let mut numeric = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &c in coords {
        let orig = x.data()[c];
        probe.data_mut()[c] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[c] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[c] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { op: "gradcheck" });
        }
        numeric.push((up - down) / (2.0 * eps));
    }
    let analytic: Vec<Real> = coords.iter().map(|&c| analytic[c]).collect();
    let rel_errors: Vec<Real> = analytic.iter().zip(&numeric).map(|(a, n)| relative_error(*a, *n)).collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, Real::max);
    Ok(GradReport {
        coords: coords.to_vec(),
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    })
}

/// Checks every coordinate of `x` for a scalar function written against the
/// tape.
pub fn finite_diff_check(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    eps: Real,
    tol: Real,
) -> Result<GradReport> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone())?;
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(leaf).map(|g| g.into_owned()).unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |p: &Tensor| -> Result<Real> {
        let mut t = Tape::inference();
        let v = t.constant(p.clone())?;
        let o = f(&mut t, v)?;
        t.value(o).item()
    };
    let coords: Vec<usize> = (0..x.len()).collect();
    compare_gradient(eval, x, &analytic, &coords, eps, tol)
}

/// Checks the gradient of a graph-built scalar wrt one named parameter.
///
/// `build` must bind the parameter called `name`; its value is replaced by
/// `x` (and by perturbed copies of `x` for the central differences).
pub fn param_grad_check(
    build: impl Fn(&mut Graph) -> Result<Var>,
    name: &str,
    x: &Tensor,
    coords: &[usize],
    eps: Real,
    tol: Real,
) -> Result<GradReport> {
    let mut g = Graph::new();
    g.override_value(name, x.clone());
    let out = build(&mut g)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(name)
        .cloned()
        .ok_or_else(|| Error::invalid(format!("parameter {name} is not a differentiable leaf of the probe")))?;
    let eval = |p: &Tensor| -> Result<Real> {
        let mut g = Graph::inference();
        g.override_value(name, p.clone());
        let o = build(&mut g)?;
        g.value(o).item()
    };
    compare_gradient(eval, x, &analytic, coords, eps, tol)
}
