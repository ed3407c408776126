use serde::Serialize;

use crate::error::{Error, Result};
use crate::latentdiff::{controlled_noise, diffusion_loss_at, lower_ddim, lower_q_sample, temporal_loss, LatentConfig};
use crate::model::{ModelConfig, SceneModel};
use crate::numerics::rng::{normal_vec, seeded, uniform_vec, SceneRng};
use crate::numerics::{param_grad_check, Graph, HasParams, Linear, Param, Tensor, Var};
use crate::parallel::Parallelism;
use crate::radiance::{ColorMode, RadianceConfig};
use crate::renderer::{all_pixels, generate_rays, lower_rays, Camera, Frame, RenderOptions};
use crate::Real;

/// Central-difference step and pass threshold on the relative error.
pub const FD_STEP: Real = 1e-4;
pub const TOLERANCE: Real = 1e-5;
const MAX_COORDS: usize = 24;
/// Away from dyadic rationals, where many time-embedding entries vanish.
const PROBE_TIMES: [Real; 2] = [0.3137, 0.6211];

pub const MODULES: [&str; 9] = [
    "sh_planes",
    "density_planes",
    "deformation_planes",
    "time_modulation",
    "attention",
    "encoder",
    "decoder",
    "denoiser",
    "beta_scale",
];

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: Real,
    /// Analytic and numeric values at the worst coordinate.
    pub worst: (Real, Real),
}

#[derive(Clone, Debug, Serialize)]
pub struct ModuleReport {
    pub module: String,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: Real,
    pub passed: bool,
}

/// Small model on which every check runs.
pub fn probe_config() -> ModelConfig {
    ModelConfig {
        resolution: 8,
        deformation_channels: 4,
        plane_init: 0.3,
        deformation_scale: 20.0,
        radiance: RadianceConfig {
            sh_order: 2,
            attention_hidden: 8,
            density_channels: 3,
            density_bias: 0.5,
        },
        latent: LatentConfig {
            patch: 4,
            token_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 8,
            latent_dim: 6,
            decoder_hidden: 5,
            decoder_sub: 2,
            diffusion_steps: 50,
            ddim_steps: 4,
            denoiser_hidden: 8,
            denoiser_blocks: 1,
            scale_hidden: 4,
            ..LatentConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn perturb(p: &mut Param, rng: &mut SceneRng, scale: Real) {
    let n = p.value.len();
    let noise = uniform_vec(rng, n, -scale, scale);
    for (v, d) in p.value.data_mut().iter_mut().zip(noise) {
        *v += d;
    }
}

fn perturb_linear(l: &mut Linear, rng: &mut SceneRng, scale: Real) {
    for p in l.params_mut() {
        perturb(p, rng, scale);
    }
}

/// The probe model, with its zero-initialised layers moved off zero.
pub fn probe_model() -> Result<SceneModel> {
    let mut model = SceneModel::new(&probe_config(), 7)?;
    let mut rng = seeded(8);
    perturb_linear(model.radiance.attention.mlp.last_layer_mut(), &mut rng, 0.5);
    if let Some(m) = &mut model.deformation.modulation {
        perturb_linear(&mut m.map, &mut rng, 0.05);
    }
    perturb_linear(&mut model.latent.decoder.out, &mut rng, 0.3);
    for f in &mut model.latent.denoiser.films {
        perturb_linear(f, &mut rng, 0.2);
    }
    perturb_linear(model.latent.scale.mlp.last_layer_mut(), &mut rng, 0.5);
    Ok(model)
}

fn render_options() -> RenderOptions {
    RenderOptions {
        samples: 24,
        parallelism: Parallelism::Sequential,
        color_mode: ColorMode::Attention,
        ..RenderOptions::default()
    }
}

fn probe_camera() -> Result<Camera> {
    Camera::look_at(2, 2, 0.3, [3.0, 1.2, 2.2], [0.1, 0.0, -0.1], [0.0, 1.0, 0.0])
}

const TARGET: [Real; 12] = [0.2, 0.7, 0.4, 0.9, 0.1, 0.3, 0.5, 0.5, 0.8, 0.0, 0.6, 1.0];

/// Squared error of a warped 2x2 render against a fixed target.
fn render_probe(model: &SceneModel) -> impl Fn(&mut Graph) -> Result<Var> + '_ {
    move |g: &mut Graph| {
        let cam = probe_camera()?;
        let frame = Frame {
            model,
            t: 0.35,
            deform: true,
            planes: None,
        };
        let rays = generate_rays(&cam, &all_pixels(&cam))?;
        let out = lower_rays(g, &frame, &rays, &render_options(), None)?;
        let target = g.constant(Tensor::new(vec![4, 3], TARGET.to_vec())?)?;
        let d = g.tape.sub(out.rgb, target)?;
        let sq = g.tape.square(d)?;
        g.tape.mean(sq)
    }
}

/// Weighted sum of the decoded residuals at two times plus the temporal loss
/// between their latents, scaled down. The stored planes only enter through the tokens.
fn refinement_probe(model: &SceneModel) -> impl Fn(&mut Graph) -> Result<Var> + '_ {
    move |g: &mut Graph| {
        let lat = &model.latent;
        let planes: Vec<Var> = model.planes().into_iter().map(|p| g.bind(p)).collect::<Result<_>>()?;
        let times = PROBE_TIMES;
        let z = lat.encode_times(g, &planes, &times)?;
        let abar = lat.alpha_bar(g, &planes)?;
        let start = lat.start_step(g, abar);
        let mut total = temporal_loss(g, z[0], z[1])?;
        for (ti, (&t, &zt)) in times.iter().zip(&z).enumerate() {
            let noise = controlled_noise(model.cfg.noise_seed, t, lat.cfg.latent_dim);
            let eps = g.constant(Tensor::new(vec![1, lat.cfg.latent_dim], noise)?)?;
            let z_init = lower_q_sample(g, zt, eps, abar, start)?;
            let zr = lower_ddim(g, &lat.denoiser, z_init, abar, start, lat.cfg.ddim_steps)?;
            for (k, r) in lat.decoder.lower(g, &lat.layout, zr)?.into_iter().enumerate() {
                let n = g.value(r).len();
                let w: Vec<Real> = (0..n).map(|i| 0.1 * ((i * 7 + k * 3 + ti) as Real * 0.37).sin()).collect();
                let wv = g.constant(Tensor::new(g.value(r).shape().to_vec(), w)?)?;
                let m = g.tape.mul(r, wv)?;
                let s = g.tape.sum(m)?;
                total = g.tape.add(total, s)?;
            }
        }
        g.tape.scale(total, 1e-3)
    }
}

/// Diffusion loss of fixed latents at fixed steps and noise.
fn diffusion_probe(model: &SceneModel) -> Result<impl Fn(&mut Graph) -> Result<Var> + '_> {
    let d = model.latent.cfg.latent_dim;
    let mut rng = seeded(25);
    let z0 = Tensor::new(vec![2, d], normal_vec(&mut rng, 2 * d))?;
    let eps = Tensor::new(vec![2, d], normal_vec(&mut rng, 2 * d))?;
    Ok(move |g: &mut Graph| {
        let planes: Vec<Var> = model.planes().into_iter().map(|p| g.bind(p)).collect::<Result<_>>()?;
        let abar = model.latent.alpha_bar(g, &planes)?;
        let zv = g.constant(z0.clone())?;
        diffusion_loss_at(g, &model.latent.denoiser, zv, abar, &[10, 40], &eps)
    })
}

fn module_params(model: &SceneModel, module: &str) -> Vec<Param> {
    let prefixes: &[&str] = match module {
        "sh_planes" => &["radiance.sh.xy", "radiance.sh.yz", "radiance.sh.xz"],
        "density_planes" => &["radiance.density.", "radiance.density_head"],
        "deformation_planes" => &["deformation.xy", "deformation.yz", "deformation.xz"],
        "time_modulation" => &["deformation.modulation"],
        "attention" => &["radiance.attention"],
        "encoder" => &["latentdiff.tokenizer", "latentdiff.encoder"],
        "decoder" => &["latentdiff.decoder"],
        "denoiser" => &["latentdiff.denoiser"],
        "beta_scale" => &["latentdiff.schedule"],
        _ => &[],
    };
    model
        .params()
        .into_iter()
        .filter(|p| p.trainable && prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .cloned()
        .collect()
}

fn check_params(probe: &dyn Fn(&mut Graph) -> Result<Var>, params: &[Param], module: &str) -> Result<ModuleReport> {
    let mut g = Graph::new();
    let loss = probe(&mut g)?;
    let grads = g.backward(loss)?;
    let mut checks = Vec::with_capacity(params.len());
    for p in params {
        let gv = grads
            .get(&p.name)
            .ok_or_else(|| Error::invalid(format!("{module}: {} receives no gradient", p.name)))?;
        let touched: Vec<usize> = (0..gv.len()).filter(|&i| gv[i] != 0.0).collect();
        let stride = (touched.len() / MAX_COORDS).max(1);
        let mut coords: Vec<usize> = touched.iter().step_by(stride).take(MAX_COORDS).copied().collect();
        coords.extend([0, gv.len() / 2, gv.len() - 1]);
        coords.sort_unstable();
        coords.dedup();
        let r = param_grad_check(probe, &p.name, &p.value, &coords, FD_STEP, TOLERANCE)?;
        let w = (0..r.rel_errors.len()).max_by(|&a, &b| r.rel_errors[a].total_cmp(&r.rel_errors[b])).unwrap_or(0);
        checks.push(ParamCheck {
            name: p.name.clone(),
            coords: coords.len(),
            max_rel_error: r.max_rel_error,
            worst: (r.analytic[w], r.numeric[w]),
        });
    }
    if checks.is_empty() {
        return Err(Error::invalid(format!("module {module} has no parameters")));
    }
    let max = checks.iter().map(|c| c.max_rel_error).fold(0.0, Real::max);
    Ok(ModuleReport {
        module: module.to_string(),
        params: checks,
        max_rel_error: max,
        passed: max < TOLERANCE,
    })
}

/// Analytic against central-difference gradients for one parameter class.
pub fn check_module(model: &SceneModel, module: &str) -> Result<ModuleReport> {
    let params = module_params(model, module);
    match module {
        "sh_planes" | "density_planes" | "deformation_planes" | "time_modulation" | "attention" => {
            check_params(&render_probe(model), &params, module)
        }
        "encoder" | "decoder" => check_params(&refinement_probe(model), &params, module),
        "denoiser" | "beta_scale" => check_params(&diffusion_probe(model)?, &params, module),
        other => Err(Error::invalid(format!("unknown module `{other}`; expected one of {}", MODULES.join(", ")))),
    }
}

/// Runs one named check, or all of them.
pub fn run_gradcheck(module: Option<&str>) -> Result<Vec<ModuleReport>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::invalid(format!("unknown module `{m}`; expected one of {}", MODULES.join(", "))));
        }
    }
    let model = probe_model()?;
    MODULES
        .iter()
        .filter(|m| module.is_none_or(|x| x == **m))
        .map(|m| check_module(&model, m))
        .collect()
}
