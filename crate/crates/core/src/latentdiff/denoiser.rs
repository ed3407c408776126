use crate::error::{Error, Result};
use crate::numerics::rng::SceneRng;
use crate::numerics::{Graph, HasParams, Linear, Param, Tensor, Var};
use crate::Real;

pub const STEP_EMBED_DIM: usize = 64;

/// Sinusoidal embedding of a diffusion step.
pub fn step_embedding(s: usize) -> Vec<Real> {
    let half = STEP_EMBED_DIM / 2;
    let mut out = vec![0.0; STEP_EMBED_DIM];
    for k in 0..half {
        let freq = (10_000.0 as Real).powf(-(k as Real) / half as Real);
        out[k] = (s as Real * freq).sin();
        out[half + k] = (s as Real * freq).cos();
    }
    out
}

/// Anything that predicts the noise in `z_s: [B, D]` at steps `s[b]`.
pub trait NoisePredictor {
    fn predict(&self, g: &mut Graph, z: Var, steps: &[usize]) -> Result<Var>;
}

/// Residual MLP whose blocks are modulated by the step embedding:
/// `h <- h + (1 + a(s)) * relu(L h) + c(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub input: Linear,
    pub blocks: Vec<Linear>,
    pub films: Vec<Linear>,
    pub output: Linear,
}

impl Denoiser {
    pub fn new(name: &str, latent: usize, hidden: usize, blocks: usize, rng: &mut SceneRng) -> Self {
        Self {
            input: Linear::new(&format!("{name}.input"), latent, hidden, 1.0, rng),
            blocks: (0..blocks)
                .map(|i| Linear::new(&format!("{name}.block{i}"), hidden, hidden, 1.0, rng))
                .collect(),
            films: (0..blocks)
                .map(|i| Linear::zeros(&format!("{name}.film{i}"), STEP_EMBED_DIM, 2 * hidden))
                .collect(),
            output: Linear::new(&format!("{name}.output"), hidden, latent, 0.1, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.input.outputs()
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, g: &mut Graph, z: Var, steps: &[usize]) -> Result<Var> {
        let rows = g.value(z).rows();
        if rows != steps.len() {
            return Err(Error::shape("denoiser", format!("{rows} latents for {} steps", steps.len())));
        }
        let emb: Vec<Real> = steps.iter().flat_map(|&s| step_embedding(s)).collect();
        let emb = g.constant(Tensor::new(vec![rows, STEP_EMBED_DIM], emb)?)?;
        let hidden = self.hidden();
        let mut h = self.input.lower(g, z)?;
        for (block, film) in self.blocks.iter().zip(&self.films) {
            let ab = film.lower(g, emb)?;
            let a = g.tape.slice_cols(ab, 0, hidden)?;
            let c = g.tape.slice_cols(ab, hidden, 2 * hidden)?;
            let u = block.lower(g, h)?;
            let u = g.tape.relu(u)?;
            let ua = g.tape.mul(u, a)?;
            let u = g.tape.add(u, ua)?;
            let u = g.tape.add(u, c)?;
            h = g.tape.add(h, u)?;
        }
        self.output.lower(g, h)
    }
}

impl HasParams for Denoiser {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.input.params();
        for (b, f) in self.blocks.iter().zip(&self.films) {
            p.extend(b.params());
            p.extend(f.params());
        }
        p.extend(self.output.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.input.params_mut();
        for (b, f) in self.blocks.iter_mut().zip(&mut self.films) {
            p.extend(b.params_mut());
            p.extend(f.params_mut());
        }
        p.extend(self.output.params_mut());
        p
    }
}

/// Test double that returns fixed noise regardless of its input.
#[derive(Clone, Debug)]
pub struct FixedNoise(pub Tensor);

impl NoisePredictor for FixedNoise {
    fn predict(&self, g: &mut Graph, _z: Var, _steps: &[usize]) -> Result<Var> {
        g.constant(self.0.clone())
    }
}
