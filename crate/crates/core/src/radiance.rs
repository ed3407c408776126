//! Canonical appearance and density.
//!
//! Colour per RGB channel is `sigmoid(sum_lm a_lm(d, t) c_lm Y_lm(d))`, where
//! the coefficients `c_lm` are summed tri-plane samples at the canonical
//! point and the band weights `a = softmax(mlp(d, gamma(t))) * (L+1)^2`.
//! Density is `softplus(w . f_sigma(x_c) + b)`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::rng::SceneRng;
use crate::numerics::{Activation, CustomOp, Graph, HasParams, Linear, Mlp, Param, Tensor, Var};
use crate::triplane::{gamma_embed, Aabb, TriPlaneSet, TIME_EMBED_DIM};
use crate::Real;

/// Highest supported SH order.
pub const MAX_SH_ORDER: usize = 10;

pub fn sh_bands(order: usize) -> usize {
    (order + 1) * (order + 1)
}

fn normalize(d: [Real; 3]) -> Result<[Real; 3]> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::invalid("direction must be finite and non-zero"));
    }
    if (n - 1.0).abs() <= 1e-6 {
        Ok(d)
    } else {
        Ok([d[0] / n, d[1] / n, d[2] / n])
    }
}

/// Real spherical harmonics in `(l, m)` order, `m = -l..=l`, orthonormal on
/// the sphere and including the Condon-Shortley phase.
pub fn sh_basis(d: [Real; 3], order: usize) -> Result<Vec<Real>> {
    if order > MAX_SH_ORDER {
        return Err(Error::invalid(format!("SH order {order} exceeds {MAX_SH_ORDER}")));
    }
    let [x, y, z] = normalize(d)?;
    let n = order + 1;
    // p[l][m]: associated Legendre polynomial divided by sin^m(theta)
    let mut p = vec![vec![0.0 as Real; n]; n];
    let mut pmm: Real = 1.0;
    for m in 0..n {
        if m > 0 {
            pmm *= -((2 * m - 1) as Real);
        }
        p[m][m] = pmm;
        if m + 1 < n {
            p[m + 1][m] = z * (2 * m + 1) as Real * pmm;
        }
        for l in m + 2..n {
            p[l][m] = ((2 * l - 1) as Real * z * p[l - 1][m] - (l + m - 1) as Real * p[l - 2][m]) / (l - m) as Real;
        }
    }
    // (x + iy)^m = sin^m(theta) e^{i m phi}
    let mut cs = vec![(1.0 as Real, 0.0 as Real); n];
    for m in 1..n {
        let (re, im) = cs[m - 1];
        cs[m] = (re * x - im * y, re * y + im * x);
    }
    let pi = std::f64::consts::PI as Real;
    let mut out = vec![0.0; sh_bands(order)];
    for l in 0..n {
        for m in 0..=l {
            let mut ratio: Real = 1.0;
            for k in (l - m + 1)..=(l + m) {
                ratio /= k as Real;
            }
            let k_lm = ((2 * l + 1) as Real / (4.0 * pi) * ratio).sqrt();
            let centre = l * l + l;
            if m == 0 {
                out[centre] = k_lm * p[l][0];
            } else {
                let s = (2.0 as Real).sqrt() * k_lm * p[l][m];
                out[centre + m] = s * cs[m].0;
                out[centre - m] = s * cs[m].1;
            }
        }
    }
    Ok(out)
}

/// How colours are decoded from the SH coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    #[default]
    Attention,
    /// Every band weight fixed to 1.
    PlainSh,
}

/// Band weights `a(d, t)` from an MLP on `[d, gamma(t)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub mlp: Mlp,
    pub order: usize,
}

pub const ATTENTION_INPUT: usize = 3 + TIME_EMBED_DIM;

impl AttentionHead {
    /// `67 -> hidden (relu) -> (L+1)^2`, last layer zeroed.
    pub fn new(name: &str, order: usize, hidden: usize, rng: &mut SceneRng) -> Result<Self> {
        if order > MAX_SH_ORDER {
            return Err(Error::invalid(format!("SH order {order} exceeds {MAX_SH_ORDER}")));
        }
        let mut mlp = Mlp::new(
            name,
            &[ATTENTION_INPUT, hidden, sh_bands(order)],
            &[Activation::Relu, Activation::Identity],
            rng,
        )?;
        mlp.last_layer_mut().zero_();
        Ok(Self { mlp, order })
    }

    pub fn input(d: [Real; 3], t: Real) -> Result<Vec<Real>> {
        let d = normalize(d)?;
        let mut v = d.to_vec();
        v.extend(gamma_embed(t)?);
        Ok(v)
    }

    pub fn weights(&self, d: [Real; 3], t: Real) -> Result<Vec<Real>> {
        let logits = self.mlp.apply(&Self::input(d, t)?)?;
        let k = logits.len() as Real;
        let max = logits.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let e: Vec<Real> = logits.iter().map(|v| (v - max).exp()).collect();
        let s: Real = e.iter().sum();
        Ok(e.into_iter().map(|v| v / s * k).collect())
    }

    /// `inputs: [R, 67] -> [R, (L+1)^2]`.
    pub fn lower(&self, g: &mut Graph, inputs: Var) -> Result<Var> {
        let logits = self.mlp.lower(g, inputs)?;
        let sm = g.tape.softmax(logits)?;
        g.tape.scale(sm, sh_bands(self.order) as Real)
    }
}

impl HasParams for AttentionHead {
    fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }
}

/// `softplus(w . f + b)` on a canonical tri-plane set.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityHead {
    pub planes: TriPlaneSet,
    pub linear: Linear,
}

impl DensityHead {
    pub fn new(planes: TriPlaneSet, bias: Real, rng: &mut SceneRng) -> Self {
        let mut linear = Linear::new("radiance.density_head", planes.channels(), 1, 1.0, rng);
        linear.bias.value.data_mut()[0] = bias;
        Self { planes, linear }
    }

    pub fn density(&self, x_c: [Real; 3]) -> Result<Real> {
        let p = self.planes.bounds.clamp(x_c);
        let f = self.planes.summed(p, 0.0)?;
        Ok(Activation::Softplus.apply(self.linear.apply(&f)?[0]))
    }

    /// `x_c: [M, 3] -> sigma: [M, 1]`.
    pub fn lower(&self, g: &mut Graph, x_c: Var) -> Result<Var> {
        let f = self.planes.lower_summed(g, x_c, 0.0)?;
        let s = self.linear.lower(g, f)?;
        g.tape.softplus(s)
    }
}

impl HasParams for DensityHead {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.planes.params();
        v.extend(self.linear.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.planes.params_mut();
        v.extend(self.linear.params_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadianceConfig {
    pub sh_order: usize,
    pub attention_hidden: usize,
    pub density_channels: usize,
    pub density_bias: Real,
}

impl Default for RadianceConfig {
    fn default() -> Self {
        Self {
            sh_order: 4,
            attention_hidden: 64,
            density_channels: 16,
            density_bias: -2.0,
        }
    }
}

/// The SH coefficient planes, attention head and density head.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceFields {
    pub sh: TriPlaneSet,
    pub attention: AttentionHead,
    pub density: DensityHead,
    pub order: usize,
}

impl RadianceFields {
    pub fn new(cfg: &RadianceConfig, resolution: usize, bounds: Aabb, init: Real, rng: &mut SceneRng) -> Result<Self> {
        let order = cfg.sh_order;
        let sh = TriPlaneSet::new("radiance.sh", resolution, 3 * sh_bands(order), false, bounds, init, rng)?;
        let attention = AttentionHead::new("radiance.attention", order, cfg.attention_hidden, rng)?;
        let dplanes = TriPlaneSet::new("radiance.density", resolution, cfg.density_channels, false, bounds, init, rng)?;
        let density = DensityHead::new(dplanes, cfg.density_bias, rng);
        Ok(Self {
            sh,
            attention,
            density,
            order,
        })
    }

    pub fn bands(&self) -> usize {
        sh_bands(self.order)
    }

    /// Direct colour of one sample.
    pub fn color(&self, x_c: [Real; 3], d: [Real; 3], t: Real, mode: ColorMode) -> Result<[Real; 3]> {
        let k = self.bands();
        let y = sh_basis(d, self.order)?;
        let a = match mode {
            ColorMode::Attention => self.attention.weights(d, t)?,
            ColorMode::PlainSh => vec![1.0; k],
        };
        let c = self.sh.summed(self.sh.bounds.clamp(x_c), 0.0)?;
        Ok([0, 1, 2].map(|ch| {
            let raw: Real = (0..k).map(|i| a[i] * c[ch * k + i] * y[i]).sum();
            Activation::Sigmoid.apply(raw)
        }))
    }
}

impl HasParams for RadianceFields {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.sh.params();
        v.extend(self.attention.params());
        v.extend(self.density.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.sh.params_mut();
        v.extend(self.attention.params_mut());
        v.extend(self.density.params_mut());
        v
    }
}

/// `raw[m, c] = sum_k A[ray(m), k] * coeffs[m, c K + k]`.
#[derive(Debug)]
struct ShContractOp {
    owner: Arc<Vec<usize>>,
    bands: usize,
}

impl CustomOp for ShContractOp {
    fn name(&self) -> &'static str {
        "sh_contract"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[Real], needs: &[bool]) -> Vec<Option<Vec<Real>>> {
        let k = self.bands;
        let (coeffs, a) = (inputs[0].data(), inputs[1].data());
        let gc = needs[0].then(|| {
            let mut g = vec![0.0; coeffs.len()];
            for (m, &r) in self.owner.iter().enumerate() {
                let ar = &a[r * k..(r + 1) * k];
                for ch in 0..3 {
                    let go = grad_out[m * 3 + ch];
                    let dst = &mut g[(m * 3 + ch) * k..(m * 3 + ch + 1) * k];
                    for (d, av) in dst.iter_mut().zip(ar) {
                        *d = go * av;
                    }
                }
            }
            g
        });
        let ga = needs[1].then(|| {
            let mut g = vec![0.0; a.len()];
            for (m, &r) in self.owner.iter().enumerate() {
                let dst = &mut g[r * k..(r + 1) * k];
                for ch in 0..3 {
                    let go = grad_out[m * 3 + ch];
                    let src = &coeffs[(m * 3 + ch) * k..(m * 3 + ch + 1) * k];
                    for (d, cv) in dst.iter_mut().zip(src) {
                        *d += go * cv;
                    }
                }
            }
            g
        });
        vec![gc, ga]
    }
}

/// Tape SH contraction; `owner[m]` is the ray of sample `m`.
pub fn sh_contract(g: &mut Graph, coeffs: Var, band_weights: Var, owner: Arc<Vec<usize>>) -> Result<Var> {
    let (cs, ws) = (g.value(coeffs).shape().to_vec(), g.value(band_weights).shape().to_vec());
    if cs.len() != 2 || ws.len() != 2 || cs[1] != 3 * ws[1] || cs[0] != owner.len() {
        return Err(Error::shape("sh_contract", format!("coefficients {cs:?}, band weights {ws:?}, {} owners", owner.len())));
    }
    let k = ws[1];
    if owner.iter().any(|&r| r >= ws[0]) {
        return Err(Error::shape("sh_contract", "sample owner out of range"));
    }
    let (c, a) = (g.value(coeffs).data(), g.value(band_weights).data());
    let mut out = vec![0.0; owner.len() * 3];
    for (m, &r) in owner.iter().enumerate() {
        let ar = &a[r * k..(r + 1) * k];
        for ch in 0..3 {
            let src = &c[(m * 3 + ch) * k..(m * 3 + ch + 1) * k];
            out[m * 3 + ch] = src.iter().zip(ar).map(|(x, y)| x * y).sum();
        }
    }
    let out = Tensor::new(vec![owner.len(), 3], out)?;
    g.tape.custom(Arc::new(ShContractOp { owner, bands: k }), &[coeffs, band_weights], out)
}

#[cfg(test)]
mod tests;
