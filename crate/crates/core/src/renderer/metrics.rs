use super::image::Image;
use crate::error::{Error, Result};
use crate::Real;

fn same_shape(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    Ok(())
}

pub fn mse(img: &Image, reference: &Image) -> Result<Real> {
    same_shape("mse", img, reference)?;
    let s: Real = img.data.iter().zip(&reference.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / img.data.len() as Real)
}

/// `10 log10(1 / MSE)`; infinite for identical images.
pub fn psnr(img: &Image, reference: &Image) -> Result<Real> {
    let m = mse(img, reference)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(m: Real) -> Real {
    if m == 0.0 {
        Real::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: Real = 1.5;
const K1: Real = 0.01;
const K2: Real = 0.03;

fn grayscale(img: &Image) -> Vec<Real> {
    img.data.chunks(3).map(|p| 0.2989 * p[0] + 0.5870 * p[1] + 0.1140 * p[2]).collect()
}

fn gaussian_window() -> Vec<Real> {
    let half = (SSIM_WINDOW / 2) as Real;
    let g: Vec<Real> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as Real - half;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: Real = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully-covered 11x11 Gaussian windows of the grayscale
/// images.
pub fn ssim(img: &Image, reference: &Image) -> Result<Real> {
    same_shape("ssim", img, reference)?;
    let (w, h) = (img.width, img.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let (x, y) = (grayscale(img), grayscale(reference));
    let g = gaussian_window();
    let (c1, c2) = ((K1 * 1.0) * (K1 * 1.0), (K2 * 1.0) * (K2 * 1.0));
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wt = g[i] * g[j];
                    let k = (r + i) * w + c + j;
                    mx += wt * x[k];
                    my += wt * y[k];
                    xx += wt * x[k] * x[k];
                    yy += wt * y[k] * y[k];
                    xy += wt * x[k] * y[k];
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (ow * oh) as Real)
}
