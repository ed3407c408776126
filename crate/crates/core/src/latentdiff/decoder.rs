use std::sync::Arc;

use super::tokenizer::PlaneLayout;
use crate::error::{Error, Result};
use crate::numerics::rng::{normal_vec, SceneRng};
use crate::numerics::{CustomOp, Graph, HasParams, Linear, Param, Tensor, Var};
use crate::Real;

/// Residual plane decoder.
///
/// Each token gets `h = relu(z W_z + E[token])` and emits `sub x sub` cells
/// of corrections, which are upsampled (nearest) onto its patch. With the
/// output layer zeroed the residual is exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub latent: Linear,
    pub token_embed: Param,
    pub out: Linear,
    pub patch: usize,
    pub sub: usize,
}

impl Decoder {
    pub fn new(name: &str, layout: &PlaneLayout, patch: usize, sub: usize, latent: usize, hidden: usize, rng: &mut SceneRng) -> Result<Self> {
        if sub == 0 || !patch.is_multiple_of(sub) {
            return Err(Error::invalid(format!("decoder sub-grid {sub} does not divide patch size {patch}")));
        }
        let tokens = layout.token_count(patch)?;
        let embed = normal_vec(rng, tokens * hidden).into_iter().map(|v| 0.02 * v).collect();
        Ok(Self {
            latent: Linear::new(&format!("{name}.latent"), latent, hidden, 1.0, rng),
            token_embed: Param::new(format!("{name}.token_embed"), Tensor::new(vec![tokens, hidden], embed)?),
            out: Linear::zeros(&format!("{name}.out"), hidden, sub * sub * layout.total_channels()),
            patch,
            sub,
        })
    }

    /// Per-plane residuals, in layout order.
    pub fn lower(&self, g: &mut Graph, layout: &PlaneLayout, z: Var) -> Result<Vec<Var>> {
        let zl = self.latent.lower(g, z)?;
        let e = g.bind(&self.token_embed)?;
        let h = g.tape.add(e, zl)?;
        let h = g.tape.relu(h)?;
        let cells = self.out.lower(g, h)?;
        unpatchify(g, layout, self.patch, self.sub, cells)
    }
}

impl HasParams for Decoder {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.latent.params();
        p.push(&self.token_embed);
        p.extend(self.out.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.latent.params_mut();
        p.push(&mut self.token_embed);
        p.extend(self.out.params_mut());
        p
    }
}

/// Scatters token rows back onto one plane, repeating sub-grid cells.
#[derive(Debug)]
struct UnpatchifyOp {
    layout: PlaneLayout,
    patch: usize,
    sub: usize,
    plane: usize,
}

impl CustomOp for UnpatchifyOp {
    fn name(&self) -> &'static str {
        "unpatchify"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[Real], needs: &[bool]) -> Vec<Option<Vec<Real>>> {
        if !needs[0] {
            return vec![None];
        }
        let mut g = vec![0.0; inputs[0].len()];
        self.layout.for_each_run(self.patch, self.sub, |input, src, dst, len| {
            if input == self.plane {
                for (d, s) in g[dst..dst + len].iter_mut().zip(&grad_out[src..src + len]) {
                    *d += s;
                }
            }
        });
        vec![Some(g)]
    }
}

/// `cells: [tokens, sub^2 * total_channels] -> planes [res, res, C_s]`.
pub fn unpatchify(g: &mut Graph, layout: &PlaneLayout, patch: usize, sub: usize, cells: Var) -> Result<Vec<Var>> {
    let tokens = layout.token_count(patch)?;
    let width = sub * sub * layout.total_channels();
    if g.value(cells).shape() != [tokens, width] {
        return Err(Error::shape("unpatchify", format!("cells {:?}, expected [{tokens}, {width}]", g.value(cells).shape())));
    }
    let r = layout.resolution;
    let mut outs: Vec<Vec<Real>> = (0..layout.planes()).map(|i| vec![0.0; r * r * layout.channels[i / 3]]).collect();
    let data = g.value(cells).data();
    layout.for_each_run(patch, sub, |input, src, dst, len| {
        outs[input][src..src + len].copy_from_slice(&data[dst..dst + len]);
    });
    let mut vars = Vec::with_capacity(outs.len());
    for (plane, values) in outs.into_iter().enumerate() {
        let op = UnpatchifyOp {
            layout: layout.clone(),
            patch,
            sub,
            plane,
        };
        let shape = vec![r, r, layout.channels[plane / 3]];
        vars.push(g.tape.custom(Arc::new(op), &[cells], Tensor::new(shape, values)?)?);
    }
    Ok(vars)
}
