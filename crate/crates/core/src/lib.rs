//! Dynamic scene reconstruction from posed, timestamped images.
//!
//! A scene is held in three sets of axis-aligned feature planes: one drives
//! an explicit warp into a canonical configuration, one stores spherical
//! harmonic colour coefficients and one stores density features. Colour is
//! decoded with per-band attention conditioned on view direction and time.
//! A transformer encodes all planes into a compact latent that a small
//! diffusion model denoises; the decoded latent adds a residual to the planes
//! before rendering.
//!
//! Everything runs on the CPU through the tape-based autodiff in
//! [`numerics`].

pub mod checkpoint;
pub mod deformation;
pub mod error;
pub mod latentdiff;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod radiance;
pub mod renderer;
pub mod scenegen;
pub mod triplane;

pub use error::{Error, Result};

/// Scalar type used for all stored values and arithmetic.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;
