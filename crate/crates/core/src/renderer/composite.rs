use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Graph, Tensor, Var};
use crate::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [Real; 3],
    pub weights: Vec<Real>,
    pub t_end: Real,
}

/// Alpha compositing of one ray front to back.
pub fn composite(sigmas: &[Real], colors: &[[Real; 3]], deltas: &[Real], background: [Real; 3]) -> Result<Composite> {
    if sigmas.len() != colors.len() || sigmas.len() != deltas.len() {
        return Err(Error::shape(
            "composite",
            format!("{} densities, {} colours, {} intervals", sigmas.len(), colors.len(), deltas.len()),
        ));
    }
    let mut rgb = [0.0; 3];
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut optical: Real = 0.0;
    for i in 0..sigmas.len() {
        if sigmas[i] < 0.0 || !sigmas[i].is_finite() {
            return Err(Error::invalid(format!("density {} at sample {i}", sigmas[i])));
        }
        let a = sigmas[i] * deltas[i];
        let t = (-optical).exp();
        let w = t * -(-a).exp_m1();
        optical += a;
        for c in 0..3 {
            rgb[c] += w * colors[i][c];
        }
        weights.push(w);
    }
    let t_end = (-optical).exp();
    for c in 0..3 {
        rgb[c] += t_end * background[c];
    }
    Ok(Composite { rgb, weights, t_end })
}

/// Batched compositing of packed samples: ray `r` owns samples
/// `offsets[r]..offsets[r + 1]`.
#[derive(Debug)]
struct CompositeOp {
    offsets: Arc<Vec<usize>>,
    deltas: Arc<Vec<Real>>,
    background: [Real; 3],
    /// Transmittance before each sample, and after the last one per ray.
    trans: Vec<Real>,
    t_end: Vec<Real>,
}

impl CustomOp for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[Real], needs: &[bool]) -> Vec<Option<Vec<Real>>> {
        let (sig, col) = (inputs[0].data(), inputs[1].data());
        let m = sig.len();
        let mut gs = vec![0.0; m];
        let mut gc = vec![0.0; 3 * m];
        for r in 0..self.offsets.len() - 1 {
            let g = &grad_out[r * 3..r * 3 + 3];
            let (lo, hi) = (self.offsets[r], self.offsets[r + 1]);
            // suffix: sum_{j > i} w_j c_j + T_end bg, dotted with g
            let mut suffix: Real = (0..3).map(|c| g[c] * self.t_end[r] * self.background[c]).sum();
            for i in (lo..hi).rev() {
                let a = sig[i] * self.deltas[i];
                let t_next = self.trans[i] * (-a).exp();
                let w = self.trans[i] - t_next;
                let gdotc: Real = (0..3).map(|c| g[c] * col[i * 3 + c]).sum();
                gs[i] = self.deltas[i] * (t_next * gdotc - suffix);
                for c in 0..3 {
                    gc[i * 3 + c] = w * g[c];
                }
                suffix += w * gdotc;
            }
        }
        vec![needs[0].then_some(gs), needs[1].then_some(gc)]
    }
}

/// Composited pixels `[R, 3]` and per-ray opacity `1 - T_end`.
pub fn lower_composite(
    g: &mut Graph,
    sigmas: Var,
    colors: Var,
    offsets: Arc<Vec<usize>>,
    deltas: Arc<Vec<Real>>,
    background: [Real; 3],
) -> Result<(Var, Vec<Real>)> {
    let (sig, col) = (g.value(sigmas), g.value(colors));
    let m = sig.len();
    if col.len() != 3 * m || deltas.len() != m || offsets.last() != Some(&m) {
        return Err(Error::shape(
            "composite",
            format!("densities {:?}, colours {:?}, {} intervals", sig.shape(), col.shape(), deltas.len()),
        ));
    }
    let (sig, col) = (sig.data(), col.data());
    if let Some(i) = sig.iter().position(|&s| s < 0.0) {
        return Err(Error::invalid(format!("negative density {} at sample {i}", sig[i])));
    }
    let rays = offsets.len() - 1;
    let mut out = vec![0.0; rays * 3];
    let mut trans = vec![0.0; m];
    let mut t_end = vec![0.0; rays];
    for r in 0..rays {
        let mut optical: Real = 0.0;
        for i in offsets[r]..offsets[r + 1] {
            let a = sig[i] * deltas[i];
            let t = (-optical).exp();
            trans[i] = t;
            let w = t * -(-a).exp_m1();
            optical += a;
            for c in 0..3 {
                out[r * 3 + c] += w * col[i * 3 + c];
            }
        }
        t_end[r] = (-optical).exp();
        for c in 0..3 {
            out[r * 3 + c] += t_end[r] * background[c];
        }
    }
    let opacity = t_end.iter().map(|t| 1.0 - t).collect();
    let op = CompositeOp {
        offsets,
        deltas,
        background,
        trans,
        t_end,
    };
    let out = g.tape.custom(Arc::new(op), &[sigmas, colors], Tensor::new(vec![rays, 3], out)?)?;
    Ok((out, opacity))
}
