use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::rng::{normal_vec, SceneRng};
use crate::numerics::{CustomOp, Graph, HasParams, Linear, Param, Tensor, Var};
use crate::triplane::{gamma_embed, TIME_EMBED_DIM};
use crate::Real;

/// Shape of the planes being tokenized: every set shares one square
/// resolution; `channels[s]` is the channel count of set `s`. Plane inputs
/// are ordered set-major, then `xy, yz, xz`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlaneLayout {
    pub resolution: usize,
    pub channels: Vec<usize>,
}

impl PlaneLayout {
    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.channels
            .iter()
            .map(|c| {
                let o = acc;
                acc += c;
                o
            })
            .collect()
    }

    pub fn planes(&self) -> usize {
        3 * self.channels.len()
    }

    pub fn patches_per_side(&self, patch: usize) -> Result<usize> {
        if patch == 0 || !self.resolution.is_multiple_of(patch) {
            return Err(Error::invalid(format!(
                "plane resolution {} is not divisible by patch size {patch}",
                self.resolution
            )));
        }
        Ok(self.resolution / patch)
    }

    pub fn token_count(&self, patch: usize) -> Result<usize> {
        let n = self.patches_per_side(patch)?;
        Ok(3 * n * n)
    }

    /// Visits every contiguous channel run shared by a plane cell and its
    /// slot in a token row of width `cell_width * total_channels`:
    /// `f(plane_input, plane_offset, token_offset, len)`. `sub` maps cells to
    /// a coarser `sub x sub` grid per patch (nearest), or is equal to `patch`
    /// for a one-to-one layout.
    pub(crate) fn for_each_run(&self, patch: usize, sub: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let res = self.resolution;
        let n = res / patch;
        let total = self.total_channels();
        let offsets = self.offsets();
        let row_width = sub * sub * total;
        for (s, &c) in self.channels.iter().enumerate() {
            for p in 0..3 {
                let input = s * 3 + p;
                for r in 0..res {
                    for col in 0..res {
                        let token = p * n * n + (r / patch) * n + col / patch;
                        let (i, j) = ((r % patch) * sub / patch, (col % patch) * sub / patch);
                        let dst = token * row_width + (i * sub + j) * total + offsets[s];
                        let src = (r * res + col) * c;
                        f(input, src, dst, c);
                    }
                }
            }
        }
    }
}

/// Copies plane cells into token rows; the adjoint scatters back.
#[derive(Debug)]
struct PatchifyOp {
    layout: PlaneLayout,
    patch: usize,
}

impl CustomOp for PatchifyOp {
    fn name(&self) -> &'static str {
        "patchify"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[Real], needs: &[bool]) -> Vec<Option<Vec<Real>>> {
        let mut out: Vec<Option<Vec<Real>>> =
            inputs.iter().zip(needs).map(|(t, &n)| n.then(|| vec![0.0; t.len()])).collect();
        self.layout.for_each_run(self.patch, self.patch, |input, src, dst, len| {
            if let Some(g) = &mut out[input] {
                g[src..src + len].copy_from_slice(&grad_out[dst..dst + len]);
            }
        });
        out
    }
}

/// `planes -> [tokens, patch^2 * total_channels]`.
pub fn patchify(g: &mut Graph, layout: &PlaneLayout, patch: usize, planes: &[Var]) -> Result<Var> {
    let tokens = layout.token_count(patch)?;
    if planes.len() != layout.planes() {
        return Err(Error::shape("patchify", format!("{} planes for layout of {}", planes.len(), layout.planes())));
    }
    for (i, &v) in planes.iter().enumerate() {
        let c = layout.channels[i / 3];
        let r = layout.resolution;
        if g.value(v).shape() != [r, r, c] {
            return Err(Error::shape("patchify", format!("plane {i} has shape {:?}, expected [{r}, {r}, {c}]", g.value(v).shape())));
        }
    }
    let width = patch * patch * layout.total_channels();
    let mut out = vec![0.0; tokens * width];
    layout.for_each_run(patch, patch, |input, src, dst, len| {
        out[dst..dst + len].copy_from_slice(&g.value(planes[input]).data()[src..src + len]);
    });
    let op = PatchifyOp {
        layout: layout.clone(),
        patch,
    };
    g.tape.custom(Arc::new(op), planes, Tensor::new(vec![tokens, width], out)?)
}

/// Fixed 2D sinusoidal embedding: the first half of the width encodes the
/// patch row, the second half the patch column.
pub fn positional_embedding(side: usize, width: usize) -> Vec<Real> {
    let half = width / 2;
    let quarter = half / 2;
    let enc = |pos: usize, out: &mut [Real]| {
        for k in 0..quarter {
            let freq = (10_000.0 as Real).powf(-(k as Real) / quarter.max(1) as Real);
            out[k] = (pos as Real * freq).sin();
            out[quarter + k] = (pos as Real * freq).cos();
        }
    };
    let mut table = vec![0.0; 3 * side * side * width];
    for p in 0..3 {
        for r in 0..side {
            for c in 0..side {
                let row = &mut table[((p * side + r) * side + c) * width..][..width];
                enc(r, &mut row[..half]);
                enc(c, &mut row[half..2 * half]);
            }
        }
    }
    table
}

/// Patch projection plus plane-id, position and time tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub patch: usize,
    pub width: usize,
    pub project: Linear,
    pub plane_embed: Param,
    pub time: Linear,
}

impl Tokenizer {
    pub fn new(name: &str, layout: &PlaneLayout, patch: usize, width: usize, rng: &mut SceneRng) -> Result<Self> {
        layout.patches_per_side(patch)?;
        let input = patch * patch * layout.total_channels();
        let plane_embed = normal_vec(rng, 3 * width).into_iter().map(|v| 0.02 * v).collect();
        Ok(Self {
            patch,
            width,
            project: Linear::new(&format!("{name}.project"), input, width, 1.0, rng),
            plane_embed: Param::new(format!("{name}.plane_embed"), Tensor::new(vec![3, width], plane_embed)?),
            time: Linear::new(&format!("{name}.time"), TIME_EMBED_DIM, width, 1.0, rng),
        })
    }

    /// Patch tokens `[N, width]` without the temporal token; independent of
    /// scene time.
    pub fn patch_tokens(&self, g: &mut Graph, layout: &PlaneLayout, planes: &[Var]) -> Result<Var> {
        let side = layout.patches_per_side(self.patch)?;
        let raw = patchify(g, layout, self.patch, planes)?;
        let proj = self.project.lower(g, raw)?;
        let ids: Vec<usize> = (0..3 * side * side).map(|i| i / (side * side)).collect();
        let pe = g.bind(&self.plane_embed)?;
        let ids = g.tape.gather_rows(pe, Arc::new(ids))?;
        let pos = g.constant(Tensor::new(vec![3 * side * side, self.width], positional_embedding(side, self.width))?)?;
        let x = g.tape.add(proj, ids)?;
        g.tape.add(x, pos)
    }

    /// `tau(t): [1, width]`.
    pub fn time_token(&self, g: &mut Graph, t: Real) -> Result<Var> {
        let e = g.constant(Tensor::new(vec![1, TIME_EMBED_DIM], gamma_embed(t)?)?)?;
        self.time.lower(g, e)
    }

    /// Full sequence `[N + 1, width]`, temporal token last.
    pub fn sequence(&self, g: &mut Graph, patch_tokens: Var, t: Real) -> Result<Var> {
        let tau = self.time_token(g, t)?;
        g.tape.concat_rows(&[patch_tokens, tau])
    }
}

impl HasParams for Tokenizer {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.project.params();
        p.push(&self.plane_embed);
        p.extend(self.time.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.project.params_mut();
        p.push(&mut self.plane_embed);
        p.extend(self.time.params_mut());
        p
    }
}
