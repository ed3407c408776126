use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::rng::SceneRng;
use crate::numerics::{Activation, CustomOp, Graph, HasParams, Mlp, Param, Tensor, Var};
use crate::Real;

pub const BETA_MIN: Real = 1e-6;
pub const BETA_MAX: Real = 0.999;
pub const STATS_DIM: usize = 12;

/// Base DDPM schedule `beta_s`, `s = 0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<Real>,
}

fn cumulative(betas: impl Iterator<Item = Real>) -> Vec<Real> {
    let mut acc = 1.0;
    betas
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}

impl NoiseSchedule {
    /// Linearly spaced betas from `start` to `end`.
    pub fn linear(steps: usize, start: Real, end: Real) -> Result<Self> {
        if steps < 2 || !(0.0 < start && start < end && end < 1.0) {
            return Err(Error::invalid(format!("bad linear schedule: {steps} steps, {start}..{end}")));
        }
        let betas = (0..steps)
            .map(|i| start + (end - start) * i as Real / (steps - 1) as Real)
            .collect();
        Ok(Self { betas })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alphas(&self) -> Vec<Real> {
        self.betas.iter().map(|b| 1.0 - b).collect()
    }

    pub fn alpha_bar(&self) -> Vec<Real> {
        cumulative(self.betas.iter().copied())
    }

    /// `beta'_s = clamp(m beta_s)`.
    pub fn scaled_betas(&self, m: Real) -> Vec<Real> {
        self.betas.iter().map(|b| (m * b).clamp(BETA_MIN, BETA_MAX)).collect()
    }

    pub fn scaled_alpha_bar(&self, m: Real) -> Vec<Real> {
        cumulative(self.scaled_betas(m).into_iter())
    }
}

/// First step whose `alpha_bar` drops to `target` or below.
pub fn start_step(alpha_bar: &[Real], target: Real) -> usize {
    alpha_bar.iter().position(|&a| a <= target).unwrap_or(alpha_bar.len() - 1)
}

#[derive(Debug)]
struct ScaledAlphaBarOp {
    betas: Vec<Real>,
}

impl CustomOp for ScaledAlphaBarOp {
    fn name(&self) -> &'static str {
        "scaled_alpha_bar"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[Real], needs: &[bool]) -> Vec<Option<Vec<Real>>> {
        if !needs[0] {
            return vec![None];
        }
        let m = inputs[0].data()[0];
        let abar = output.data();
        // d abar_s / dm = abar_s * sum_{r <= s} d ln(1 - beta'_r) / dm
        let mut dlog = 0.0;
        let mut g = 0.0;
        for (s, &b) in self.betas.iter().enumerate() {
            let raw = m * b;
            if (BETA_MIN..=BETA_MAX).contains(&raw) {
                dlog -= b / (1.0 - raw);
            }
            g += grad_out[s] * abar[s] * dlog;
        }
        vec![Some(vec![g])]
    }
}

/// `m: [1, 1] -> alpha_bar': [1, T]`.
pub fn lower_scaled_alpha_bar(g: &mut Graph, schedule: &NoiseSchedule, m: Var) -> Result<Var> {
    let mv = g.value(m).item()?;
    let abar = schedule.scaled_alpha_bar(mv);
    let op = ScaledAlphaBarOp {
        betas: schedule.betas.clone(),
    };
    let out = Tensor::new(vec![1, abar.len()], abar)?;
    g.tape.custom(Arc::new(op), &[m], out)
}

/// Per-plane mean, standard deviation, mean magnitude and max magnitude of
/// the three axis pairs, pooled over all sets.
pub fn plane_stats(planes: &[&Tensor]) -> Result<Vec<Real>> {
    if planes.is_empty() || !planes.len().is_multiple_of(3) {
        return Err(Error::invalid(format!("{} planes do not form tri-plane sets", planes.len())));
    }
    let mut out = Vec::with_capacity(STATS_DIM);
    for p in 0..3 {
        let vals = planes.iter().skip(p).step_by(3).flat_map(|t| t.data().iter().copied());
        let (mut n, mut sum, mut sq, mut abs, mut max) = (0usize, 0.0, 0.0, 0.0, 0.0 as Real);
        for v in vals {
            n += 1;
            sum += v;
            sq += v * v;
            abs += v.abs();
            max = max.max(v.abs());
        }
        let nf = n.max(1) as Real;
        let mean = sum / nf;
        out.extend([mean, (sq / nf - mean * mean).max(0.0).sqrt(), abs / nf, max]);
    }
    Ok(out)
}

/// `m = 0.5 + 1.5 sigmoid(mlp(stats))`, output layer zeroed so `m = 1.25`
/// at init.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMlp {
    pub mlp: Mlp,
}

impl ScaleMlp {
    pub fn new(name: &str, hidden: usize, rng: &mut SceneRng) -> Result<Self> {
        let mut mlp = Mlp::new(name, &[STATS_DIM, hidden, 1], &[Activation::Relu, Activation::Identity], rng)?;
        mlp.last_layer_mut().zero_();
        Ok(Self { mlp })
    }

    pub fn multiplier(&self, stats: &[Real]) -> Result<Real> {
        let v = self.mlp.apply(stats)?[0];
        Ok(0.5 + 1.5 * Activation::Sigmoid.apply(v))
    }

    /// `stats: [1, 12] -> m: [1, 1]`.
    pub fn lower(&self, g: &mut Graph, stats: Var) -> Result<Var> {
        let v = self.mlp.lower(g, stats)?;
        let s = g.tape.sigmoid(v)?;
        let s = g.tape.scale(s, 1.5)?;
        g.tape.add_scalar(s, 0.5)
    }
}

impl HasParams for ScaleMlp {
    fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }
}
