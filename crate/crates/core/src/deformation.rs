//! Explicit warp into canonical space: `dx = W (f_xy + f_yz + f_xz) + b`,
//! `x_c = x + dx`, with `W` and `b` fixed at construction.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::rng::{uniform_vec, SceneRng};
use crate::numerics::{Graph, HasParams, Param, Tensor, Var};
use crate::triplane::{Aabb, TriPlaneSet};
use crate::Real;

/// Prefix of the fixed projection records.
pub const PROJECTION_NAME: &str = "deformation.projection";

/// Fixed `3 x C` projection and offset. Neither is ever trained.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationHead {
    pub weight: Param,
    pub bias: Param,
}

impl DeformationHead {
    /// `W ~ U(-a, a)` with `a = scale * 0.01 / sqrt(C)`, `b = 0`.
    pub fn new(channels: usize, scale: Real, rng: &mut SceneRng) -> Self {
        let a = scale * 0.01 / (channels as Real).sqrt();
        let w = uniform_vec(rng, 3 * channels, -a, a);
        Self::from_values(channels, w, [0.0; 3]).expect("consistent sizes")
    }

    pub fn from_values(channels: usize, weight: Vec<Real>, bias: [Real; 3]) -> Result<Self> {
        Ok(Self {
            weight: Param::fixed(format!("{PROJECTION_NAME}.weight"), Tensor::new(vec![3, channels], weight)?),
            bias: Param::fixed(format!("{PROJECTION_NAME}.bias"), Tensor::vector(bias.to_vec())),
        })
    }

    pub fn channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// `W v + b`.
    pub fn project(&self, v: &[Real]) -> Result<[Real; 3]> {
        let c = self.channels();
        if v.len() != c {
            return Err(Error::shape("deform", format!("feature of length {} for projection 3x{c}", v.len())));
        }
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        Ok([0, 1, 2].map(|r| b[r] + w[r * c..(r + 1) * c].iter().zip(v).map(|(a, x)| a * x).sum::<Real>()))
    }

    /// FNV-1a over the bit patterns of `W` and `b`.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.weight.value.data().iter().chain(self.bias.value.data()) {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

impl HasParams for DeformationHead {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformResult {
    pub delta_x: [Real; 3],
    /// `x + delta_x`, before clamping.
    pub x_c: [Real; 3],
}

impl DeformResult {
    /// Canonical point clamped to the world box, as used for lookups.
    pub fn sample_point(&self, bounds: &Aabb) -> [Real; 3] {
        bounds.clamp(self.x_c)
    }
}

pub fn deform(set: &TriPlaneSet, head: &DeformationHead, x: [Real; 3], t: Real) -> Result<DeformResult> {
    let f = set.summed(x, t)?;
    let delta_x = head.project(&f)?;
    Ok(DeformResult {
        delta_x,
        x_c: [x[0] + delta_x[0], x[1] + delta_x[1], x[2] + delta_x[2]],
    })
}

pub fn deform_identity(x: [Real; 3]) -> DeformResult {
    DeformResult { delta_x: [0.0; 3], x_c: x }
}

/// Tape warp of `points: [N, 3]`; returns `(delta [N, 3], clamped x_c [N, 3])`.
pub fn lower_deform(g: &mut Graph, set: &TriPlaneSet, head: &DeformationHead, points: Var, t: Real) -> Result<(Var, Var)> {
    let f = set.lower_summed(g, points, t)?;
    let w = g.bind(&head.weight)?;
    let wt = g.tape.transpose(w)?;
    let b = g.bind(&head.bias)?;
    let fw = g.tape.matmul(f, wt)?;
    let delta = g.tape.add(fw, b)?;
    let xc = g.tape.add(points, delta)?;
    let b = &set.bounds;
    let xc = g.tape.clamp(xc, Arc::new(b.min.to_vec()), Arc::new(b.max.to_vec()))?;
    Ok((delta, xc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;
    use crate::triplane::AxisPair;
    use proptest::prelude::*;

    fn set(seed: u64) -> TriPlaneSet {
        TriPlaneSet::new("deformation", 8, 5, true, Aabb::default(), 0.1, &mut seeded(seed)).unwrap()
    }

    fn zeroed(mut s: TriPlaneSet) -> TriPlaneSet {
        for p in &mut s.planes {
            p.values.value.data_mut().fill(0.0);
        }
        s
    }

    #[test]
    fn zero_planes_and_bias_leave_points_in_place() {
        let s = zeroed(set(1));
        let head = DeformationHead::new(5, 10.0, &mut seeded(2));
        let r = deform(&s, &head, [0.3, -0.2, 0.5], 0.4).unwrap();
        assert_eq!(r.delta_x, [0.0; 3]);
        assert_eq!(r.x_c, [0.3, -0.2, 0.5]);
    }

    #[test]
    fn zero_planes_shift_by_bias() {
        let s = zeroed(set(1));
        let head = DeformationHead::from_values(5, vec![0.7; 15], [0.1, 0.0, 0.0]).unwrap();
        for &(x, t) in &[([0.0, 0.0, 0.0], 0.0), ([0.9, -0.9, 0.2], 0.7)] {
            let r = deform(&s, &head, x, t).unwrap();
            assert_eq!(r.delta_x, [0.1, 0.0, 0.0]);
        }
    }

    #[test]
    fn offset_matches_independent_matrix_product() {
        let s = set(3);
        let head = DeformationHead::new(5, 50.0, &mut seeded(4));
        let x = [0.25, 0.6, -0.35];
        let f = s.summed(x, 0.2).unwrap();
        let w = head.weight.value.data();
        let mut expect = [0.0; 3];
        for (r, e) in expect.iter_mut().enumerate() {
            for c in 0..5 {
                *e += w[r * 5 + c] * f[c];
            }
        }
        let r = deform(&s, &head, x, 0.2).unwrap();
        for k in 0..3 {
            assert!((r.delta_x[k] - expect[k]).abs() < 1e-15);
            assert_eq!(r.x_c[k], x[k] + r.delta_x[k]);
        }
    }

    #[test]
    fn identity_warp() {
        let r = deform_identity([0.3, -0.2, 0.5]);
        assert_eq!(r.x_c, [0.3, -0.2, 0.5]);
        assert_eq!(r.delta_x, [0.0; 3]);
    }

    #[test]
    fn head_is_fixed_and_named_outside_the_head_namespace() {
        let head = DeformationHead::new(5, 10.0, &mut seeded(0));
        assert!(head.params().iter().all(|p| !p.trainable && !p.name.contains("deformation.head")));
        let mut g = Graph::new();
        let w = g.bind(&head.weight).unwrap();
        assert!(!g.tape.requires_grad(w));
    }

    #[test]
    fn tape_warp_matches_direct_warp_and_clamps() {
        let s = set(5);
        let head = DeformationHead::from_values(5, vec![3.0; 15], [0.0; 3]).unwrap();
        let pts = [[0.1, 0.2, 0.3], [0.95, -0.9, 0.99]];
        let mut g = Graph::inference();
        let p = g.constant(Tensor::new(vec![2, 3], pts.iter().flatten().copied().collect()).unwrap()).unwrap();
        let (delta, xc) = lower_deform(&mut g, &s, &head, p, 0.5).unwrap();
        for (i, x) in pts.iter().enumerate() {
            let r = deform(&s, &head, *x, 0.5).unwrap();
            let clamped = r.sample_point(&s.bounds);
            for k in 0..3 {
                assert!((g.value(delta).data()[i * 3 + k] - r.delta_x[k]).abs() < 1e-14);
                assert!((g.value(xc).data()[i * 3 + k] - clamped[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradient_reaches_deformation_planes_through_the_warp() {
        let s = set(6);
        let head = DeformationHead::new(5, 10.0, &mut seeded(7));
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let (_, xc) = lower_deform(&mut g, &s, &head, p, 0.5).unwrap();
        let loss = g.tape.sum(xc).unwrap();
        let grads = g.backward(loss).unwrap();
        for axes in AxisPair::ALL {
            let gp = &grads[&format!("deformation.{}", axes.tag())];
            assert!(gp.iter().any(|&v| v != 0.0));
        }
        assert!(!grads.contains_key(&format!("{PROJECTION_NAME}.weight")));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn offset_is_linear_in_plane_values(seed in 0u64..500, alpha in -3.0f64..3.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let s = set(seed);
            let mut scaled = s.clone();
            for p in &mut scaled.planes {
                for v in p.values.value.data_mut() {
                    *v *= alpha as Real;
                }
            }
            let head = DeformationHead::new(5, 40.0, &mut seeded(seed + 1));
            let p = [x as Real, y as Real, z as Real];
            let a = deform(&s, &head, p, 0.3).unwrap().delta_x;
            let b = deform(&scaled, &head, p, 0.3).unwrap().delta_x;
            for k in 0..3 {
                prop_assert!((b[k] - alpha as Real * a[k]).abs() < 1e-12);
            }
        }
    }
}
