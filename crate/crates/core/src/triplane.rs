//! Axis-aligned feature planes and their differentiable bilinear lookup.
//!
//! A plane spanning world axes `(a, b)` maps coordinate `a` onto the row
//! axis `[0, H-1]` and coordinate `b` onto the column axis `[0, W-1]` of an
//! `H x W x C` grid. Queries outside the world box clamp to the boundary.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{uniform_vec, SceneRng};
use crate::numerics::{CustomOp, Graph, HasParams, Linear, Param, Tensor, Var};
use crate::Real;

/// Length of the sinusoidal time embedding.
pub const TIME_EMBED_DIM: usize = 64;

/// `[sin(2^k pi t) for k in 0..32, cos(2^k pi t) for k in 0..32]`.
pub fn gamma_embed(t: Real) -> Result<Vec<Real>> {
    if !t.is_finite() {
        return Err(Error::NonFinite { op: "gamma_embed" });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("scene time {t} outside [0, 1]")));
    }
    let pairs = TIME_EMBED_DIM / 2;
    let mut out = vec![0.0; TIME_EMBED_DIM];
    let mut freq: Real = std::f64::consts::PI as Real;
    for k in 0..pairs {
        let a = freq * t;
        out[k] = a.sin();
        out[pairs + k] = a.cos();
        freq *= 2.0;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisPair {
    Xy,
    Yz,
    Xz,
}

impl AxisPair {
    pub const ALL: [AxisPair; 3] = [AxisPair::Xy, AxisPair::Yz, AxisPair::Xz];

    /// World axes mapped to rows and columns.
    pub fn axes(self) -> (usize, usize) {
        match self {
            AxisPair::Xy => (0, 1),
            AxisPair::Yz => (1, 2),
            AxisPair::Xz => (0, 2),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            AxisPair::Xy => "xy",
            AxisPair::Yz => "yz",
            AxisPair::Xz => "xz",
        }
    }
}

/// Axis-aligned world box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [Real; 3],
    pub max: [Real; 3],
}

impl Default for Aabb {
    fn default() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

impl Aabb {
    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !(self.min[k].is_finite() && self.max[k].is_finite() && self.min[k] < self.max[k]) {
                return Err(Error::invalid(format!("degenerate bounds on axis {k}")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: [Real; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn clamp(&self, p: [Real; 3]) -> [Real; 3] {
        [0, 1, 2].map(|k| p[k].clamp(self.min[k], self.max[k]))
    }

    /// Ray parameter interval inside the box, if any.
    pub fn ray_interval(&self, origin: [Real; 3], dir: [Real; 3]) -> Option<(Real, Real)> {
        let (mut lo, mut hi) = (Real::NEG_INFINITY, Real::INFINITY);
        for k in 0..3 {
            if dir[k].abs() < 1e-300 as Real {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - origin[k]) / dir[k];
            let b = (self.max[k] - origin[k]) / dir[k];
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (lo <= hi).then_some((lo, hi))
    }
}

/// One `H x W x C` feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneGrid {
    pub axes: AxisPair,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Param,
}

impl PlaneGrid {
    pub fn new(name: String, axes: AxisPair, height: usize, width: usize, channels: usize, values: Vec<Real>) -> Result<Self> {
        if height < 2 || width < 2 || channels == 0 {
            return Err(Error::invalid(format!(
                "plane {name} needs at least 2x2 cells and 1 channel, got {height}x{width}x{channels}"
            )));
        }
        let values = Tensor::new(vec![height, width, channels], values)?;
        Ok(Self {
            axes,
            height,
            width,
            channels,
            values: Param::new(name, values),
        })
    }

    pub fn geometry(&self, bounds: &Aabb) -> PlaneGeometry {
        let (a, b) = self.axes.axes();
        PlaneGeometry {
            axes: (a, b),
            height: self.height,
            width: self.width,
            channels: self.channels,
            lo: (bounds.min[a], bounds.min[b]),
            hi: (bounds.max[a], bounds.max[b]),
        }
    }
}

/// Everything a lookup needs besides the cell values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneGeometry {
    pub axes: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub lo: (Real, Real),
    pub hi: (Real, Real),
}

/// Bilinear stencil of one query: four cell offsets, their weights and the
/// weight derivatives wrt the two world coordinates.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Footprint {
    pub cells: [usize; 4],
    pub w: [Real; 4],
    pub du: [Real; 4],
    pub dv: [Real; 4],
}

fn axis_coord(x: Real, lo: Real, hi: Real, n: usize) -> (usize, Real, Real) {
    let span = (n - 1) as Real;
    let g = (x - lo) / (hi - lo) * span;
    let inside = x >= lo && x <= hi;
    let g = g.clamp(0.0, span);
    let i0 = (g.floor() as usize).min(n - 2);
    let scale = if inside { span / (hi - lo) } else { 0.0 };
    (i0, g - i0 as Real, scale)
}

impl PlaneGeometry {
    pub(crate) fn footprint(&self, u: Real, v: Real) -> Footprint {
        let (r0, fr, su) = axis_coord(u, self.lo.0, self.hi.0, self.height);
        let (c0, fc, sv) = axis_coord(v, self.lo.1, self.hi.1, self.width);
        let c = self.channels;
        let base = (r0 * self.width + c0) * c;
        let right = c;
        let down = self.width * c;
        Footprint {
            cells: [base, base + right, base + down, base + down + right],
            w: [(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc],
            du: [-(1.0 - fc) * su, -fc * su, (1.0 - fc) * su, fc * su],
            dv: [-(1.0 - fr) * sv, (1.0 - fr) * sv, -fr * sv, fr * sv],
        }
    }
}

/// Direct bilinear lookup of one plane at world coordinates `(u, v)`.
pub fn sample_plane(plane: &PlaneGrid, bounds: &Aabb, u: Real, v: Real) -> Result<Vec<Real>> {
    if !(u.is_finite() && v.is_finite()) {
        return Err(Error::NonFinite { op: "sample_plane" });
    }
    let fp = plane.geometry(bounds).footprint(u, v);
    let values = plane.values.value.data();
    let mut out = vec![0.0; plane.channels];
    for k in 0..4 {
        let cell = &values[fp.cells[k]..fp.cells[k] + plane.channels];
        for (o, x) in out.iter_mut().zip(cell) {
            *o += fp.w[k] * x;
        }
    }
    Ok(out)
}

/// Sum of bilinear lookups over several planes for a batch of points.
///
/// Inputs are the plane values followed by the points `[N, 3]`; the output
/// is `[N, C]`.
#[derive(Debug)]
struct PlaneSampleOp {
    geometry: Vec<PlaneGeometry>,
    /// `footprints[p * n + i]` for plane `p`, point `i`.
    footprints: Vec<Footprint>,
    points: usize,
}

impl CustomOp for PlaneSampleOp {
    fn name(&self) -> &'static str {
        "plane_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[Real], needs: &[bool]) -> Vec<Option<Vec<Real>>> {
        let n = self.points;
        let planes = self.geometry.len();
        let mut out: Vec<Option<Vec<Real>>> = Vec::with_capacity(planes + 1);
        for (p, geo) in self.geometry.iter().enumerate() {
            if !needs[p] {
                out.push(None);
                continue;
            }
            let c = geo.channels;
            let mut g = vec![0.0; inputs[p].len()];
            for i in 0..n {
                let fp = &self.footprints[p * n + i];
                let go = &grad_out[i * c..(i + 1) * c];
                for k in 0..4 {
                    let w = fp.w[k];
                    if w == 0.0 {
                        continue;
                    }
                    let dst = &mut g[fp.cells[k]..fp.cells[k] + c];
                    for (d, gv) in dst.iter_mut().zip(go) {
                        *d += w * gv;
                    }
                }
            }
            out.push(Some(g));
        }
        if needs[planes] {
            let mut gp = vec![0.0; n * 3];
            for (p, geo) in self.geometry.iter().enumerate() {
                let c = geo.channels;
                let values = inputs[p].data();
                for i in 0..n {
                    let fp = &self.footprints[p * n + i];
                    let go = &grad_out[i * c..(i + 1) * c];
                    let (mut su, mut sv) = (0.0, 0.0);
                    for k in 0..4 {
                        if fp.du[k] == 0.0 && fp.dv[k] == 0.0 {
                            continue;
                        }
                        let cell = &values[fp.cells[k]..fp.cells[k] + c];
                        let dot: Real = cell.iter().zip(go).map(|(a, b)| a * b).sum();
                        su += fp.du[k] * dot;
                        sv += fp.dv[k] * dot;
                    }
                    gp[i * 3 + geo.axes.0] += su;
                    gp[i * 3 + geo.axes.1] += sv;
                }
            }
            out.push(Some(gp));
        } else {
            out.push(None);
        }
        out
    }
}

/// Tape lookup: `sum_p sample(plane_p, points)` with `points: [N, 3]`.
pub fn sample_planes_var(g: &mut Graph, planes: &[(Var, PlaneGeometry)], points: Var) -> Result<Var> {
    let pts = g.value(points);
    if pts.shape().len() != 2 || pts.shape()[1] != 3 {
        return Err(Error::shape("plane_sample", format!("points must be [N, 3], got {:?}", pts.shape())));
    }
    let c = planes.first().map(|p| p.1.channels).ok_or_else(|| Error::invalid("no planes to sample"))?;
    if planes.iter().any(|p| p.1.channels != c) {
        return Err(Error::shape("plane_sample", "planes disagree on channel count"));
    }
    let n = pts.shape()[0];
    let pts = pts.data().to_vec();
    let mut footprints = Vec::with_capacity(planes.len() * n);
    let mut out = vec![0.0; n * c];
    for &(var, geo) in planes {
        let values = g.value(var);
        if values.shape() != [geo.height, geo.width, geo.channels] {
            return Err(Error::shape("plane_sample", format!("plane values {:?} do not match geometry", values.shape())));
        }
        let values = values.data();
        for i in 0..n {
            let fp = geo.footprint(pts[i * 3 + geo.axes.0], pts[i * 3 + geo.axes.1]);
            let dst = &mut out[i * c..(i + 1) * c];
            for k in 0..4 {
                let w = fp.w[k];
                if w == 0.0 {
                    continue;
                }
                let cell = &values[fp.cells[k]..fp.cells[k] + c];
                for (d, x) in dst.iter_mut().zip(cell) {
                    *d += w * x;
                }
            }
            footprints.push(fp);
        }
    }
    let op = PlaneSampleOp {
        geometry: planes.iter().map(|p| p.1).collect(),
        footprints,
        points: n,
    };
    let mut inputs: Vec<Var> = planes.iter().map(|p| p.0).collect();
    inputs.push(points);
    g.tape.custom(Arc::new(op), &inputs, Tensor::new(vec![n, c], out)?)
}

/// Per-channel FiLM from the time embedding: `f <- (1 + s(t)) * f + h(t)`.
///
/// The output of the linear map is laid out as the three scale blocks
/// followed by the three shift blocks, one block of `C` per plane.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeModulation {
    pub map: Linear,
    pub channels: usize,
}

impl TimeModulation {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            map: Linear::zeros(name, TIME_EMBED_DIM, 6 * channels),
            channels,
        }
    }

    /// `(scale, shift)` for plane `p`.
    pub fn film(&self, t: Real) -> Result<Vec<(Vec<Real>, Vec<Real>)>> {
        let out = self.map.apply(&gamma_embed(t)?)?;
        let c = self.channels;
        Ok((0..3)
            .map(|p| (out[p * c..(p + 1) * c].to_vec(), out[(3 + p) * c..(4 + p) * c].to_vec()))
            .collect())
    }

    fn lower(&self, g: &mut Graph, t: Real) -> Result<Var> {
        let e = g.constant(Tensor::new(vec![1, TIME_EMBED_DIM], gamma_embed(t)?)?)?;
        self.map.lower(g, e)
    }
}

impl HasParams for TimeModulation {
    fn params(&self) -> Vec<&Param> {
        self.map.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.map.params_mut()
    }
}

/// The planes `xy`, `yz`, `xz` with optional time modulation.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneSet {
    pub name: String,
    pub planes: [PlaneGrid; 3],
    pub modulation: Option<TimeModulation>,
    pub bounds: Aabb,
}

impl TriPlaneSet {
    /// Uniform init in `[-init, init]`.
    pub fn new(
        name: &str,
        resolution: usize,
        channels: usize,
        modulated: bool,
        bounds: Aabb,
        init: Real,
        rng: &mut SceneRng,
    ) -> Result<Self> {
        bounds.validate()?;
        let mk = |axes: AxisPair, rng: &mut SceneRng| {
            let values = uniform_vec(rng, resolution * resolution * channels, -init, init);
            PlaneGrid::new(format!("{name}.{}", axes.tag()), axes, resolution, resolution, channels, values)
        };
        let planes = [mk(AxisPair::Xy, rng)?, mk(AxisPair::Yz, rng)?, mk(AxisPair::Xz, rng)?];
        Ok(Self {
            name: name.to_string(),
            planes,
            modulation: modulated.then(|| TimeModulation::new(&format!("{name}.modulation"), channels)),
            bounds,
        })
    }

    pub fn channels(&self) -> usize {
        self.planes[0].channels
    }

    pub fn resolution(&self) -> usize {
        self.planes[0].height
    }

    pub fn geometry(&self) -> [PlaneGeometry; 3] {
        [0, 1, 2].map(|p| self.planes[p].geometry(&self.bounds))
    }

    /// Direct per-point features `(f_xy, f_yz, f_xz)`, modulated at `t`.
    pub fn features(&self, x: [Real; 3], t: Real) -> Result<[Vec<Real>; 3]> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "triplane_features" });
        }
        let film = match &self.modulation {
            Some(m) => Some(m.film(t)?),
            None => {
                gamma_embed(t)?;
                None
            }
        };
        let mut out: [Vec<Real>; 3] = Default::default();
        for (p, plane) in self.planes.iter().enumerate() {
            let (a, b) = plane.axes.axes();
            let mut f = sample_plane(plane, &self.bounds, x[a], x[b])?;
            if let Some(film) = &film {
                let (s, h) = &film[p];
                for ((v, sv), hv) in f.iter_mut().zip(s).zip(h) {
                    *v = (1.0 + sv) * *v + hv;
                }
            }
            out[p] = f;
        }
        Ok(out)
    }

    /// Direct summed feature `f_xy + f_yz + f_xz`.
    pub fn summed(&self, x: [Real; 3], t: Real) -> Result<Vec<Real>> {
        let [a, b, c] = self.features(x, t)?;
        Ok(a.iter().zip(&b).zip(&c).map(|((x, y), z)| x + y + z).collect())
    }

    /// Tape version of [`Self::summed`] for `points: [N, 3]`.
    pub fn lower_summed(&self, g: &mut Graph, points: Var, t: Real) -> Result<Var> {
        let geo = self.geometry();
        let mut vars = Vec::with_capacity(3);
        for plane in &self.planes {
            vars.push(g.bind(&plane.values)?);
        }
        let Some(m) = &self.modulation else {
            let planes: Vec<_> = vars.into_iter().zip(geo).collect();
            return sample_planes_var(g, &planes, points);
        };
        let film = m.lower(g, t)?;
        let c = self.channels();
        let mut total: Option<Var> = None;
        for p in 0..3 {
            let raw = sample_planes_var(g, &[(vars[p], geo[p])], points)?;
            let s = g.tape.slice_cols(film, p * c, (p + 1) * c)?;
            let h = g.tape.slice_cols(film, (3 + p) * c, (4 + p) * c)?;
            let scaled = g.tape.mul(raw, s)?;
            let f = g.tape.add(raw, scaled)?;
            let f = g.tape.add(f, h)?;
            total = Some(match total {
                Some(acc) => g.tape.add(acc, f)?,
                None => f,
            });
        }
        Ok(total.expect("three planes"))
    }
}

impl HasParams for TriPlaneSet {
    fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.planes.iter().map(|p| &p.values).collect();
        if let Some(m) = &self.modulation {
            out.extend(m.params());
        }
        out
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.planes.iter_mut().map(|p| &mut p.values).collect();
        if let Some(m) = &mut self.modulation {
            out.extend(m.params_mut());
        }
        out
    }
}
