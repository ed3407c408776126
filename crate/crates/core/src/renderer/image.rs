use std::path::Path;

use crate::error::{Error, Result};
use crate::Real;

/// Row-major `H x W x 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Real>,
    /// Per-pixel accumulated opacity, when rendered.
    pub opacity: Option<Vec<Real>>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("image", format!("{} values for {width}x{height}x3", data.len())));
        }
        Ok(Self {
            width,
            height,
            data,
            opacity: None,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [Real; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
            opacity: None,
        }
    }

    pub fn pixel(&self, col: usize, row: usize) -> [Real; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// PNG bytes, each channel scaled by 255 and rounded half away from zero.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::invalid("image buffer size mismatch"))?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Decodes a PNG; an alpha channel is composited onto `background`.
    pub fn load_png(path: &Path, background: [Real; 3]) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgba = img.to_rgba8();
        let (w, h) = rgba.dimensions();
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for px in rgba.pixels() {
            let a = px[3] as Real / 255.0;
            for c in 0..3 {
                let v = px[c] as Real / 255.0;
                data.push(v * a + background[c] * (1.0 - a));
            }
        }
        Self::new(w as usize, h as usize, data)
    }
}
