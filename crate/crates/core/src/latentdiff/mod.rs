//! Latent refinement of the planes.
//!
//! The planes of every set are cut into patches and projected to tokens,
//! a transformer pools them into a latent `z`, and a residual decoder maps a
//! latent back onto per-cell corrections. A noise-prediction MLP trained with
//! the DDPM objective denoises `z` with deterministic DDIM steps before
//! decoding. The diffusion step is called `s` throughout to keep it apart
//! from scene time `t`.

mod decoder;
mod denoiser;
mod encoder;
mod schedule;
mod tokenizer;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{unpatchify, Decoder};
pub use denoiser::{step_embedding, Denoiser, FixedNoise, NoisePredictor, STEP_EMBED_DIM};
pub use encoder::Encoder;
pub use schedule::{lower_scaled_alpha_bar, plane_stats, start_step, NoiseSchedule, ScaleMlp, BETA_MAX, BETA_MIN, STATS_DIM};
pub use tokenizer::{patchify, positional_embedding, PlaneLayout, Tokenizer};

use crate::error::{Error, Result};
use crate::numerics::rng::{derived, normal_vec, SceneRng};
use crate::numerics::{Graph, HasParams, Param, Tensor, Var};
use crate::Real;

pub const PREFIX: &str = "latentdiff";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    pub patch: usize,
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    /// Corrections per patch side; nearest-upsampled to the patch size.
    pub decoder_sub: usize,
    pub diffusion_steps: usize,
    pub beta_start: Real,
    pub beta_end: Real,
    pub ddim_steps: usize,
    /// `alpha_bar` of the step the inference noise is injected at.
    pub inference_alpha_bar: Real,
    pub denoiser_hidden: usize,
    pub denoiser_blocks: usize,
    pub scale_hidden: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            token_dim: 128,
            layers: 4,
            heads: 4,
            ff_dim: 256,
            latent_dim: 512,
            decoder_hidden: 128,
            decoder_sub: 4,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 10,
            inference_alpha_bar: 0.7,
            denoiser_hidden: 512,
            denoiser_blocks: 4,
            scale_hidden: 32,
        }
    }
}

/// `sqrt(abar_s) z0 + sqrt(1 - abar_s) eps`.
pub fn q_sample(z0: &[Real], s: usize, eps: &[Real], alpha_bar: &[Real]) -> Result<Vec<Real>> {
    let a = *alpha_bar
        .get(s)
        .ok_or_else(|| Error::invalid(format!("diffusion step {s} outside 0..{}", alpha_bar.len())))?;
    if z0.len() != eps.len() {
        return Err(Error::shape("q_sample", format!("latent {} vs noise {}", z0.len(), eps.len())));
    }
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| sa * z + sb * e).collect())
}

fn coefficient(g: &mut Graph, alpha_bar: Var, s: usize) -> Result<Var> {
    let t = g.value(alpha_bar).row_len();
    if s >= t {
        return Err(Error::invalid(format!("diffusion step {s} outside 0..{t}")));
    }
    g.tape.slice_cols(alpha_bar, s, s + 1)
}

fn sqrt_one_minus(g: &mut Graph, a: Var) -> Result<Var> {
    let na = g.tape.scale(a, -1.0)?;
    let om = g.tape.add_scalar(na, 1.0)?;
    g.tape.sqrt(om)
}

/// Tape version of [`q_sample`]; `alpha_bar: [1, T]`.
pub fn lower_q_sample(g: &mut Graph, z0: Var, eps: Var, alpha_bar: Var, s: usize) -> Result<Var> {
    let a = coefficient(g, alpha_bar, s)?;
    let sa = g.tape.sqrt(a)?;
    let sb = sqrt_one_minus(g, a)?;
    let x = g.tape.mul(z0, sa)?;
    let n = g.tape.mul(eps, sb)?;
    g.tape.add(x, n)
}

/// `||eps - eps_theta(q_sample(z0, s, eps), s)||^2`, averaged over rows of
/// `z0: [B, D]` when every row shares step `s`.
pub fn diffusion_loss_at(
    g: &mut Graph,
    predictor: &dyn NoisePredictor,
    z0: Var,
    alpha_bar: Var,
    steps: &[usize],
    eps: &Tensor,
) -> Result<Var> {
    let rows = g.value(z0).rows();
    if steps.len() != rows || eps.shape() != g.value(z0).shape() {
        return Err(Error::shape("diffusion_loss", "latents, steps and noise disagree"));
    }
    let d = g.value(z0).row_len();
    let ev = g.constant(eps.clone())?;
    let mut noisy = Vec::with_capacity(rows);
    for (b, &s) in steps.iter().enumerate() {
        let zb = slice_row(g, z0, b, d)?;
        let eb = slice_row(g, ev, b, d)?;
        noisy.push(lower_q_sample(g, zb, eb, alpha_bar, s)?);
    }
    let zs = if rows == 1 { noisy[0] } else { g.tape.concat_rows(&noisy)? };
    let pred = predictor.predict(g, zs, steps)?;
    let diff = g.tape.sub(ev, pred)?;
    let sq = g.tape.square(diff)?;
    let total = g.tape.sum(sq)?;
    g.tape.scale(total, 1.0 / rows as Real)
}

fn slice_row(g: &mut Graph, x: Var, row: usize, width: usize) -> Result<Var> {
    if g.value(x).rows() == 1 {
        return Ok(x);
    }
    let idx = std::sync::Arc::new(vec![row]);
    let r = g.tape.gather_rows(x, idx)?;
    g.tape.reshape(r, vec![1, width])
}

/// Draws `s ~ U{0..T}` and `eps ~ N(0, I)` per row, then evaluates the loss.
pub fn diffusion_loss(g: &mut Graph, predictor: &dyn NoisePredictor, z0: Var, alpha_bar: Var, rng: &mut SceneRng) -> Result<Var> {
    let t = g.value(alpha_bar).row_len();
    let shape = g.value(z0).shape().to_vec();
    let rows = g.value(z0).rows();
    let steps: Vec<usize> = (0..rows).map(|_| rng.random_range(0..t)).collect();
    let eps = Tensor::new(shape, normal_vec(rng, g.value(z0).len()))?;
    diffusion_loss_at(g, predictor, z0, alpha_bar, &steps, &eps)
}

/// Evenly spaced descending steps starting at `start`.
pub fn ddim_timesteps(start: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::invalid("DDIM needs at least one step"));
    }
    let mut out: Vec<usize> = (0..steps)
        .map(|i| ((start as Real) * (steps - i) as Real / steps as Real).round() as usize)
        .collect();
    out.dedup();
    Ok(out)
}

/// Deterministic DDIM from step `start` down to the clean latent.
pub fn lower_ddim(
    g: &mut Graph,
    predictor: &dyn NoisePredictor,
    z_init: Var,
    alpha_bar: Var,
    start: usize,
    steps: usize,
) -> Result<Var> {
    let ts = ddim_timesteps(start, steps)?;
    let rows = g.value(z_init).rows();
    let mut z = z_init;
    for (i, &s) in ts.iter().enumerate() {
        let a = coefficient(g, alpha_bar, s)?;
        let eps = predictor.predict(g, z, &vec![s; rows])?;
        let sb = sqrt_one_minus(g, a)?;
        let la = g.tape.ln(a)?;
        let la = g.tape.scale(la, -0.5)?;
        let inv_sa = g.tape.exp(la)?;
        let noise = g.tape.mul(eps, sb)?;
        let x0 = g.tape.sub(z, noise)?;
        let x0 = g.tape.mul(x0, inv_sa)?;
        z = match ts.get(i + 1) {
            Some(&next) => {
                let a2 = coefficient(g, alpha_bar, next)?;
                let sa2 = g.tape.sqrt(a2)?;
                let sb2 = sqrt_one_minus(g, a2)?;
                let x = g.tape.mul(x0, sa2)?;
                let n = g.tape.mul(eps, sb2)?;
                g.tape.add(x, n)?
            }
            None => x0,
        };
    }
    Ok(z)
}

/// Value-only DDIM.
pub fn ddim_sample(predictor: &dyn NoisePredictor, z_init: &Tensor, alpha_bar: &[Real], start: usize, steps: usize) -> Result<Tensor> {
    let mut g = Graph::inference();
    let z = g.constant(z_init.clone())?;
    let a = g.constant(Tensor::new(vec![1, alpha_bar.len()], alpha_bar.to_vec())?)?;
    let out = lower_ddim(&mut g, predictor, z, a, start, steps)?;
    Ok(g.value(out).clone())
}

/// `||b - a||^2`.
pub fn temporal_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.tape.sub(b, a)?;
    let sq = g.tape.square(d)?;
    g.tape.sum(sq)
}

/// The noise injected before inference denoising at scene time `t`; the
/// same at train and evaluation time.
pub fn controlled_noise(seed: u64, t: Real, dim: usize) -> Vec<Real> {
    normal_vec(&mut derived(seed, (t as f64).to_bits()), dim)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDiffusion {
    pub cfg: LatentConfig,
    pub layout: PlaneLayout,
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub scale: ScaleMlp,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl LatentDiffusion {
    pub fn new(cfg: &LatentConfig, layout: PlaneLayout, rng: &mut SceneRng) -> Result<Self> {
        if !(0.0 < cfg.inference_alpha_bar && cfg.inference_alpha_bar < 1.0) {
            return Err(Error::invalid("inference_alpha_bar must lie in (0, 1)"));
        }
        let tokenizer = Tokenizer::new(&format!("{PREFIX}.tokenizer"), &layout, cfg.patch, cfg.token_dim, rng)?;
        let encoder = Encoder::new(
            &format!("{PREFIX}.encoder"),
            cfg.token_dim,
            cfg.layers,
            cfg.heads,
            cfg.ff_dim,
            cfg.latent_dim,
            rng,
        )?;
        let decoder = Decoder::new(
            &format!("{PREFIX}.decoder"),
            &layout,
            cfg.patch,
            cfg.decoder_sub,
            cfg.latent_dim,
            cfg.decoder_hidden,
            rng,
        )?;
        let scale = ScaleMlp::new(&format!("{PREFIX}.schedule"), cfg.scale_hidden, rng)?;
        let denoiser = Denoiser::new(&format!("{PREFIX}.denoiser"), cfg.latent_dim, cfg.denoiser_hidden, cfg.denoiser_blocks, rng);
        let schedule = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            tokenizer,
            encoder,
            decoder,
            scale,
            denoiser,
            schedule,
        })
    }

    pub fn token_count(&self) -> Result<usize> {
        self.layout.token_count(self.cfg.patch)
    }

    /// Latents `[1, D]` for each time; the patch tokens are shared.
    pub fn encode_times(&self, g: &mut Graph, planes: &[Var], times: &[Real]) -> Result<Vec<Var>> {
        let tokens = self.tokenizer.patch_tokens(g, &self.layout, planes)?;
        times
            .iter()
            .map(|&t| {
                let seq = self.tokenizer.sequence(g, tokens, t)?;
                self.encoder.lower(g, seq)
            })
            .collect()
    }

    /// Scaled `alpha_bar: [1, T]` from (detached) plane statistics.
    pub fn alpha_bar(&self, g: &mut Graph, planes: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = planes.iter().map(|&v| g.value(v)).collect();
        let stats = plane_stats(&values)?;
        let sv = g.constant(Tensor::new(vec![1, STATS_DIM], stats)?)?;
        let m = self.scale.lower(g, sv)?;
        lower_scaled_alpha_bar(g, &self.schedule, m)
    }

    pub fn start_step(&self, g: &Graph, alpha_bar: Var) -> usize {
        start_step(g.value(alpha_bar).data(), self.cfg.inference_alpha_bar)
    }

    /// Noise-inject, denoise and decode `z`; returns `F + D(z_refined)` per
    /// plane.
    pub fn refine(&self, g: &mut Graph, planes: &[Var], z: Var, alpha_bar: Var, t: Real, noise_seed: u64) -> Result<Vec<Var>> {
        let start = self.start_step(g, alpha_bar);
        let eps = g.constant(Tensor::new(vec![1, self.cfg.latent_dim], controlled_noise(noise_seed, t, self.cfg.latent_dim))?)?;
        let z_init = lower_q_sample(g, z, eps, alpha_bar, start)?;
        let zr = lower_ddim(g, &self.denoiser, z_init, alpha_bar, start, self.cfg.ddim_steps)?;
        let residual = self.decoder.lower(g, &self.layout, zr)?;
        planes.iter().zip(residual).map(|(&p, r)| g.tape.add(p, r)).collect()
    }
}

impl HasParams for LatentDiffusion {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.tokenizer.params();
        p.extend(self.encoder.params());
        p.extend(self.decoder.params());
        p.extend(self.scale.params());
        p.extend(self.denoiser.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.tokenizer.params_mut();
        p.extend(self.encoder.params_mut());
        p.extend(self.decoder.params_mut());
        p.extend(self.scale.params_mut());
        p.extend(self.denoiser.params_mut());
        p
    }
}

#[cfg(test)]
mod tests;
