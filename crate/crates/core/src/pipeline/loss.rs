use serde::{Deserialize, Serialize};

use super::config::LossWeights;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::Real;

/// The three terms of the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: Real,
    pub diff: Real,
    pub temporal: Real,
}

/// `lambda_rec rec + lambda_diff diff + lambda_temporal temporal`. With
/// `no_diffusion` the last two terms are exactly zero.
pub fn total_loss(parts: &LossParts, w: &LossWeights, no_diffusion: bool) -> Result<Real> {
    w.validate()?;
    for (name, v) in [("rec", parts.rec), ("diff", parts.diff), ("temporal", parts.temporal)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
        if v < 0.0 {
            return Err(Error::invalid(format!("loss part {name} is negative ({v})")));
        }
    }
    let rec = w.lambda_rec * parts.rec;
    if no_diffusion {
        return Ok(rec);
    }
    Ok(rec + w.lambda_diff * parts.diff + w.lambda_temporal * parts.temporal)
}

/// Mean squared error over matched pixel batches.
pub fn reconstruction_loss(rendered: &[Real], target: &[Real]) -> Result<Real> {
    if rendered.len() != target.len() || rendered.is_empty() {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("{} rendered values for {} targets", rendered.len(), target.len()),
        ));
    }
    let sum: Real = rendered.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / rendered.len() as Real)
}

/// Tape version of [`reconstruction_loss`], multiplied by `scale`.
pub fn lower_reconstruction_loss(g: &mut Graph, rgb: Var, target: &[Real], scale: Real) -> Result<Var> {
    let shape = g.value(rgb).shape().to_vec();
    if g.value(rgb).len() != target.len() {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("{} rendered values for {} targets", g.value(rgb).len(), target.len()),
        ));
    }
    let t = g.constant(Tensor::new(shape, target.to_vec())?)?;
    let d = g.tape.sub(rgb, t)?;
    let sq = g.tape.square(d)?;
    let m = g.tape.mean(sq)?;
    g.tape.scale(m, scale)
}
