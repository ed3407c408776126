//! Analytic dynamic scenes and datasets in the NeRF-synthetic layout.

mod dataset;
mod oracle;

use serde::{Deserialize, Serialize};

pub use dataset::{
    generate_dataset, load_dataset, load_scene_record, load_split, orbit_cameras, test_cameras, DatasetFrame, GenerateOptions, SceneDataset,
    Split, SCENE_FILE,
};
pub use oracle::{intersect, oracle_render, shade, Hit};

use crate::error::{Error, Result};
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: Real },
    /// Axis-aligned box.
    Box { half_extents: [Real; 3] },
}

/// Offset from the base position as a function of time. Every track is
/// zero at `t = 1`, the canonical configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    #[default]
    Static,
    /// `amplitude * sin(2 pi frequency (t - 1))`.
    Sinusoidal { amplitude: [Real; 3], frequency: Real },
    /// Piecewise-linear offsets through `(t, offset)` keyframes, held
    /// constant outside them.
    Linear { keyframes: Vec<(Real, [Real; 3])> },
}

impl Motion {
    pub fn offset(&self, t: Real) -> [Real; 3] {
        match self {
            Motion::Static => [0.0; 3],
            Motion::Sinusoidal { amplitude, frequency } => {
                let s = (2.0 * std::f64::consts::PI as Real * frequency * (t - 1.0)).sin();
                amplitude.map(|a| a * s)
            }
            Motion::Linear { keyframes } => {
                let Some(first) = keyframes.first() else {
                    return [0.0; 3];
                };
                if t <= first.0 {
                    return first.1;
                }
                for w in keyframes.windows(2) {
                    let ((t0, a), (t1, b)) = (w[0], w[1]);
                    if t <= t1 {
                        let u = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
                        return [0, 1, 2].map(|k| a[k] + u * (b[k] - a[k]));
                    }
                }
                keyframes.last().expect("non-empty").1
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [Real; 3],
    /// Position at the canonical time `t = 1`.
    pub center: [Real; 3],
    #[serde(default)]
    pub motion: Motion,
}

impl Primitive {
    pub fn center_at(&self, t: Real) -> [Real; 3] {
        let o = self.motion.offset(t);
        [0, 1, 2].map(|k| self.center[k] + o[k])
    }

    fn half_extents(&self) -> [Real; 3] {
        match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half_extents } => half_extents,
        }
    }
}

/// Where the cameras are placed by [`generate_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Capture {
    pub radius: Real,
    pub fov_x: Real,
    /// Elevation range of the training cameras, radians above the `xz` plane.
    pub elevation: [Real; 2],
    /// Azimuth jitter as a fraction of the spacing between views.
    pub jitter: Real,
    /// Held-out cameras, placed between the training azimuths.
    pub test_views: usize,
}

impl Default for Capture {
    fn default() -> Self {
        Self {
            radius: 4.0,
            fov_x: 0.6911,
            elevation: [0.1, 0.6],
            jitter: 0.25,
            test_views: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Direction towards the light.
    pub light_dir: [Real; 3],
    #[serde(default = "white")]
    pub background: [Real; 3],
    /// Adds a Phong highlight with exponent 32.
    #[serde(default)]
    pub specular: bool,
    #[serde(default)]
    pub capture: Capture,
}

fn white() -> [Real; 3] {
    [1.0; 3]
}

pub const BOUNDS_SAMPLES: usize = 100;

impl SceneSpec {
    /// A single sphere bobbing through the scene, used by the demos and the
    /// reference checks.
    pub fn moving_sphere() -> Self {
        Self {
            primitives: vec![Primitive {
                shape: Shape::Sphere { radius: 0.4 },
                albedo: [0.9, 0.25, 0.2],
                center: [0.0, 0.0, 0.0],
                motion: Motion::Sinusoidal {
                    amplitude: [0.3, 0.15, 0.0],
                    frequency: 0.5,
                },
            }],
            light_dir: [0.4, 1.0, 0.6],
            background: white(),
            specular: false,
            capture: Capture::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::invalid("scene has no primitives"));
        }
        let norm: Real = self.light_dir.iter().map(|v| v * v).sum();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::invalid("light_dir must be a non-zero finite vector"));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::invalid("background must lie in [0, 1]"));
        }
        let c = &self.capture;
        if !(c.radius > 0.0 && c.fov_x > 0.0 && c.fov_x < std::f64::consts::PI as Real) {
            return Err(Error::invalid("capture radius must be positive and fov_x inside (0, pi)"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !p.albedo.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::invalid(format!("primitives[{i}].albedo must lie in [0, 1]")));
            }
            let h = p.half_extents();
            if !h.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("primitives[{i}] has a non-positive size")));
            }
            if let Motion::Linear { keyframes } = &p.motion {
                if keyframes.windows(2).any(|w| w[1].0 < w[0].0) {
                    return Err(Error::invalid(format!("primitives[{i}] keyframes are not sorted by time")));
                }
            }
            for s in 0..BOUNDS_SAMPLES {
                let t = s as Real / (BOUNDS_SAMPLES - 1) as Real;
                let c = p.center_at(t);
                if (0..3).any(|k| (c[k] - h[k]) < -1.0 || (c[k] + h[k]) > 1.0) {
                    return Err(Error::invalid(format!("primitives[{i}] leaves [-1, 1]^3 at t = {t:.3}")));
                }
            }
        }
        Ok(())
    }

    pub fn light(&self) -> [Real; 3] {
        crate::renderer::normalize3(self.light_dir)
    }
}

#[cfg(test)]
mod tests;
