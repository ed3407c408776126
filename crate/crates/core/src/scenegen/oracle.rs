use super::{Primitive, SceneSpec, Shape};
use crate::error::Result;
use crate::parallel::{self, Parallelism};
use crate::renderer::{Camera, Image, Ray};
use crate::Real;

const SPECULAR_EXPONENT: i32 = 32;
const SPECULAR_STRENGTH: Real = 0.3;
const EPS: Real = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: Real,
    pub normal: [Real; 3],
    pub primitive: usize,
}

fn dot(a: [Real; 3], b: [Real; 3]) -> Real {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn hit_primitive(p: &Primitive, ray: &Ray, t: Real) -> Option<(Real, [Real; 3])> {
    let c = p.center_at(t);
    let oc = [0, 1, 2].map(|k| ray.origin[k] - c[k]);
    match p.shape {
        Shape::Sphere { radius } => {
            let b = dot(oc, ray.dir);
            let disc = b * b - (dot(oc, oc) - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let d = [-b - s, -b + s].into_iter().find(|&d| d > EPS)?;
            let n = [0, 1, 2].map(|k| (oc[k] + d * ray.dir[k]) / radius);
            Some((d, n))
        }
        Shape::Box { half_extents } => {
            let (mut lo, mut hi) = (Real::NEG_INFINITY, Real::INFINITY);
            let mut axis = 0;
            for k in 0..3 {
                if ray.dir[k].abs() < 1e-300 {
                    if oc[k].abs() > half_extents[k] {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / ray.dir[k];
                let (a, b) = ((-half_extents[k] - oc[k]) * inv, (half_extents[k] - oc[k]) * inv);
                let (a, b) = if a <= b { (a, b) } else { (b, a) };
                if a > lo {
                    lo = a;
                    axis = k;
                }
                hi = hi.min(b);
            }
            if lo > hi || lo <= EPS {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = -ray.dir[axis].signum();
            Some((lo, n))
        }
    }
}

/// Nearest intersection in front of the ray origin at time `t`.
pub fn intersect(spec: &SceneSpec, ray: &Ray, t: Real) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in spec.primitives.iter().enumerate() {
        if let Some((d, n)) = hit_primitive(p, ray, t) {
            if best.is_none_or(|b| d < b.distance) {
                best = Some(Hit {
                    distance: d,
                    normal: n,
                    primitive: i,
                });
            }
        }
    }
    best
}

/// Colour of a ray: Lambertian with ambient term, plus the optional Phong
/// highlight; misses return the background.
pub fn shade(spec: &SceneSpec, ray: &Ray, t: Real) -> [Real; 3] {
    let Some(hit) = intersect(spec, ray, t) else {
        return spec.background;
    };
    let l = spec.light();
    let albedo = spec.primitives[hit.primitive].albedo;
    let diffuse = dot(hit.normal, l).max(0.0);
    let mut rgb = albedo.map(|a| 0.8 * diffuse * a + 0.2 * a);
    if spec.specular && diffuse > 0.0 {
        let nl = dot(hit.normal, l);
        let r = [0, 1, 2].map(|k| 2.0 * nl * hit.normal[k] - l[k]);
        let s = SPECULAR_STRENGTH * dot(r, ray.dir.map(|v| -v)).max(0.0).powi(SPECULAR_EXPONENT);
        rgb = rgb.map(|c| (c + s).min(1.0));
    }
    rgb
}

/// Ground-truth image, one ray through each pixel centre.
pub fn oracle_render(spec: &SceneSpec, cam: &Camera, t: Real, parallelism: Parallelism) -> Result<Image> {
    let rows = parallel::map_range(parallelism, cam.height, |r| -> Result<Vec<Real>> {
        let mut row = Vec::with_capacity(cam.width * 3);
        for c in 0..cam.width {
            row.extend(shade(spec, &cam.ray(c, r)?, t));
        }
        Ok(row)
    });
    let mut data = Vec::with_capacity(cam.width * cam.height * 3);
    for row in rows {
        data.extend(row?);
    }
    Image::new(cam.width, cam.height, data)
}
