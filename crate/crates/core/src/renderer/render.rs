use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::camera::{all_pixels, Camera, Ray};
use super::composite::lower_composite;
use super::image::Image;
use super::sampling::sample_depths;
use crate::deformation::lower_deform;
use crate::error::{Error, Result};
use crate::model::SceneModel;
use crate::numerics::rng::SceneRng;
use crate::numerics::{Graph, Tensor, Var};
use crate::parallel::{self, Parallelism};
use crate::radiance::{sh_basis, sh_contract, AttentionHead, ColorMode, ATTENTION_INPUT};
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    pub near: Real,
    pub far: Real,
    /// Samples per ray before culling to the world box.
    pub samples: usize,
    pub background: [Real; 3],
    /// Rays per independently evaluated chunk.
    pub chunk_rays: usize,
    pub color_mode: ColorMode,
    pub parallelism: Parallelism,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            near: 2.0,
            far: 6.0,
            samples: 64,
            background: [1.0; 3],
            chunk_rays: 1024,
            color_mode: ColorMode::Attention,
            parallelism: Parallelism::Threads,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.near < self.far && self.near >= 0.0) {
            return Err(Error::invalid(format!("need 0 <= near < far, got {} and {}", self.near, self.far)));
        }
        if self.samples == 0 || self.chunk_rays == 0 {
            return Err(Error::invalid("samples and chunk_rays must be positive"));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::invalid("background must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// What to evaluate for a batch of rays at one scene time.
#[derive(Clone, Copy, Debug)]
pub struct Frame<'a> {
    pub model: &'a SceneModel,
    pub t: Real,
    pub deform: bool,
    /// Values bound in place of the stored planes, in tokenizer order.
    pub planes: Option<&'a [Tensor]>,
}

/// Output of [`lower_rays`].
#[derive(Debug)]
pub struct RayBatch {
    /// `[R, 3]`.
    pub rgb: Var,
    pub opacity: Vec<Real>,
    /// Samples kept inside the world box.
    pub samples: usize,
    /// Warped sample points when the deformation ran, `[samples, 3]`.
    pub canonical: Option<Var>,
    pub points: Option<Var>,
}

struct Packed {
    points: Vec<Real>,
    deltas: Vec<Real>,
    owner: Vec<usize>,
    offsets: Vec<usize>,
}

fn pack(frame: &Frame, rays: &[Ray], opts: &RenderOptions, mut jitter: Option<&mut SceneRng>) -> Result<Packed> {
    let bounds = frame.model.cfg.bounds;
    let mut out = Packed {
        points: Vec::new(),
        deltas: Vec::new(),
        owner: Vec::new(),
        offsets: vec![0],
    };
    for (r, ray) in rays.iter().enumerate() {
        let s = sample_depths(opts.near, opts.far, opts.samples, jitter.is_some(), jitter.as_deref_mut())?;
        for (&t, &d) in s.depths.iter().zip(&s.deltas) {
            let p = [0, 1, 2].map(|k| ray.origin[k] + t * ray.dir[k]);
            if bounds.contains(p) {
                out.points.extend(p);
                out.deltas.push(d);
                out.owner.push(r);
            }
        }
        out.offsets.push(out.owner.len());
    }
    Ok(out)
}

/// Records the rendering of `rays` on `g`. Samples outside the world box
/// carry no density and are dropped. With `jitter`, depths are stratified.
pub fn lower_rays(g: &mut Graph, frame: &Frame, rays: &[Ray], opts: &RenderOptions, jitter: Option<&mut SceneRng>) -> Result<RayBatch> {
    let model = frame.model;
    if let Some(planes) = frame.planes {
        let names = model.plane_names();
        if planes.len() != names.len() {
            return Err(Error::shape("render", format!("{} plane overrides for {} planes", planes.len(), names.len())));
        }
        for (name, v) in names.into_iter().zip(planes) {
            g.override_value(name, v.clone());
        }
    }
    let packed = pack(frame, rays, opts, jitter)?;
    let m = packed.owner.len();
    if m == 0 {
        let bg: Vec<Real> = rays.iter().flat_map(|_| opts.background).collect();
        let rgb = g.constant(Tensor::new(vec![rays.len(), 3], bg)?)?;
        return Ok(RayBatch {
            rgb,
            opacity: vec![0.0; rays.len()],
            samples: 0,
            canonical: None,
            points: None,
        });
    }
    let points = g.constant(Tensor::new(vec![m, 3], packed.points)?)?;
    let xc = if frame.deform {
        lower_deform(g, &model.deformation, &model.head, points, frame.t)?.1
    } else {
        points
    };
    let rad = &model.radiance;
    let sigma = rad.density.lower(g, xc)?;
    let coeffs = rad.sh.lower_summed(g, xc, 0.0)?;
    let k = rad.bands();
    let mut basis = Vec::with_capacity(rays.len() * k);
    for ray in rays {
        basis.extend(sh_basis(ray.dir, rad.order)?);
    }
    let basis = g.constant(Tensor::new(vec![rays.len(), k], basis)?)?;
    let band_weights = match opts.color_mode {
        ColorMode::PlainSh => basis,
        ColorMode::Attention => {
            let mut inputs = Vec::with_capacity(rays.len() * ATTENTION_INPUT);
            for ray in rays {
                inputs.extend(AttentionHead::input(ray.dir, frame.t)?);
            }
            let inputs = g.constant(Tensor::new(vec![rays.len(), ATTENTION_INPUT], inputs)?)?;
            let alpha = rad.attention.lower(g, inputs)?;
            g.tape.mul(alpha, basis)?
        }
    };
    let raw = sh_contract(g, coeffs, band_weights, Arc::new(packed.owner))?;
    let colors = g.tape.sigmoid(raw)?;
    let (rgb, opacity) = lower_composite(
        g,
        sigma,
        colors,
        Arc::new(packed.offsets),
        Arc::new(packed.deltas),
        opts.background,
    )?;
    Ok(RayBatch {
        rgb,
        opacity,
        samples: m,
        canonical: frame.deform.then_some(xc),
        points: Some(points),
    })
}

/// Latents and refined planes for several times, recorded on one graph.
#[derive(Debug)]
pub struct Refinement {
    /// The stored planes as bound on the graph.
    pub planes: Vec<Var>,
    /// `[1, D]` per time.
    pub latents: Vec<Var>,
    pub alpha_bar: Var,
    /// `F + D(z)` per time, in tokenizer order.
    pub refined: Vec<Vec<Var>>,
}

pub fn lower_refinement(g: &mut Graph, model: &SceneModel, times: &[Real], refine: bool) -> Result<Refinement> {
    let planes: Vec<Var> = model.planes().into_iter().map(|p| g.bind(p)).collect::<Result<_>>()?;
    let lat = &model.latent;
    let latents = lat.encode_times(g, &planes, times)?;
    let alpha_bar = lat.alpha_bar(g, &planes)?;
    let mut refined = Vec::new();
    if refine {
        for (&t, &z) in times.iter().zip(&latents) {
            refined.push(lat.refine(g, &planes, z, alpha_bar, t, model.cfg.noise_seed)?);
        }
    }
    Ok(Refinement {
        planes,
        latents,
        alpha_bar,
        refined,
    })
}

/// Refined plane values at time `t`.
pub fn refined_planes(model: &SceneModel, t: Real) -> Result<Vec<Tensor>> {
    let mut g = Graph::inference();
    let r = lower_refinement(&mut g, model, &[t], true)?;
    Ok(r.refined[0].iter().map(|&v| g.value(v).clone()).collect())
}

/// How a full image is rendered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderMode {
    pub deform: bool,
    /// Render from the refined planes instead of the stored ones.
    pub refine: bool,
}

impl Default for RenderMode {
    fn default() -> Self {
        Self { deform: true, refine: true }
    }
}

/// Colours and opacities of the given pixels, evaluated chunk by chunk.
pub fn render_pixels(
    model: &SceneModel,
    cam: &Camera,
    pixels: &[(usize, usize)],
    t: Real,
    opts: &RenderOptions,
    deform: bool,
    planes: Option<&[Tensor]>,
) -> Result<(Vec<Real>, Vec<Real>)> {
    opts.validate()?;
    let frame = Frame { model, t, deform, planes };
    let chunks: Vec<&[(usize, usize)]> = pixels.chunks(opts.chunk_rays).collect();
    let results = parallel::map(opts.parallelism, &chunks, |chunk| -> Result<(Vec<Real>, Vec<Real>)> {
        let rays: Vec<Ray> = chunk.iter().map(|&(c, r)| cam.ray(c, r)).collect::<Result<_>>()?;
        let mut g = Graph::inference();
        let out = lower_rays(&mut g, &frame, &rays, opts, None)?;
        Ok((g.value(out.rgb).data().to_vec(), out.opacity))
    });
    let mut rgb = Vec::with_capacity(pixels.len() * 3);
    let mut opacity = Vec::with_capacity(pixels.len());
    for r in results {
        let (c, o) = r?;
        rgb.extend(c);
        opacity.extend(o);
    }
    if let Some(i) = rgb.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite colour at value {i}")));
    }
    Ok((rgb, opacity))
}

/// Renders the whole image seen by `cam` at time `t`.
pub fn render_image(model: &SceneModel, cam: &Camera, t: Real, opts: &RenderOptions, mode: RenderMode) -> Result<Image> {
    let refined = if mode.refine { Some(refined_planes(model, t)?) } else { None };
    let pixels = all_pixels(cam);
    let (rgb, opacity) = render_pixels(model, cam, &pixels, t, opts, mode.deform, refined.as_deref())?;
    let mut img = Image::new(cam.width, cam.height, rgb)?;
    img.opacity = Some(opacity);
    Ok(img)
}
