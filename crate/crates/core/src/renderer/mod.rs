//! Cameras, ray sampling, volume compositing and image metrics.

mod camera;
mod composite;
mod image;
mod metrics;
mod render;
mod sampling;

pub use camera::{all_pixels, generate_rays, normalize3, Camera, Ray};
pub use composite::{composite, lower_composite, Composite};
pub use image::Image;
pub use metrics::{mse, psnr, psnr_from_mse, ssim, SSIM_WINDOW};
pub use render::{
    lower_rays, lower_refinement, refined_planes, render_image, render_pixels, Frame, RayBatch, Refinement, RenderMode,
    RenderOptions,
};
pub use sampling::{sample_depths, RaySamples};
