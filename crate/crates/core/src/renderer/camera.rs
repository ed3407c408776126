use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

/// Pinhole camera with OpenGL axes: the camera looks down its local `-Z`,
/// `+Y` is up and `+X` is right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in radians.
    pub fov_x: Real,
    /// Camera-to-world, row-major.
    pub c2w: [[Real; 4]; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [Real; 3],
    pub dir: [Real; 3],
}

pub fn normalize3(v: [Real; 3]) -> [Real; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [Real; 3], b: [Real; 3]) -> [Real; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

impl Camera {
    pub fn new(width: usize, height: usize, fov_x: Real, c2w: [[Real; 4]; 4]) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fov_x,
            c2w,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image must have at least one pixel"));
        }
        if !(self.fov_x > 0.0 && self.fov_x < std::f64::consts::PI as Real) {
            return Err(Error::invalid(format!("field of view {} outside (0, pi)", self.fov_x)));
        }
        if !self.c2w.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "camera" });
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: Real = (0..3).map(|k| self.c2w[k][i] * self.c2w[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`.
    pub fn look_at(width: usize, height: usize, fov_x: Real, eye: [Real; 3], target: [Real; 3], up: [Real; 3]) -> Result<Self> {
        let back = normalize3([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
        let right = normalize3(cross(up, back));
        let true_up = cross(back, right);
        let mut m = [[0.0; 4]; 4];
        for k in 0..3 {
            m[k][0] = right[k];
            m[k][1] = true_up[k];
            m[k][2] = back[k];
            m[k][3] = eye[k];
        }
        m[3][3] = 1.0;
        Self::new(width, height, fov_x, m)
    }

    pub fn focal(&self) -> Real {
        0.5 * self.width as Real / (0.5 * self.fov_x).tan()
    }

    pub fn origin(&self) -> [Real; 3] {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    /// Unit direction of the local `-Z` axis in world space.
    pub fn forward(&self) -> [Real; 3] {
        [-self.c2w[0][2], -self.c2w[1][2], -self.c2w[2][2]]
    }

    /// Ray through the centre of pixel `(col, row)`.
    pub fn ray(&self, col: usize, row: usize) -> Result<Ray> {
        if col >= self.width || row >= self.height {
            return Err(Error::invalid(format!(
                "pixel ({col}, {row}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let f = self.focal();
        let local = [
            (col as Real + 0.5 - 0.5 * self.width as Real) / f,
            -(row as Real + 0.5 - 0.5 * self.height as Real) / f,
            -1.0,
        ];
        let m = &self.c2w;
        let world = [0, 1, 2].map(|r| m[r][0] * local[0] + m[r][1] * local[1] + m[r][2] * local[2]);
        Ok(Ray {
            origin: self.origin(),
            dir: normalize3(world),
        })
    }
}

/// Rays through the given `(col, row)` pixels.
pub fn generate_rays(cam: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels.iter().map(|&(c, r)| cam.ray(c, r)).collect()
}

/// Every pixel in row-major order.
pub fn all_pixels(cam: &Camera) -> Vec<(usize, usize)> {
    (0..cam.height).flat_map(|r| (0..cam.width).map(move |c| (c, r))).collect()
}
