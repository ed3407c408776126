//! The complete scene representation and its configuration.

use serde::{Deserialize, Serialize};

use crate::deformation::DeformationHead;
use crate::error::{Error, Result};
use crate::latentdiff::{LatentConfig, LatentDiffusion, PlaneLayout};
use crate::numerics::rng::{derived, SceneRng};
use crate::numerics::{HasParams, Param};
use crate::radiance::{RadianceConfig, RadianceFields};
use crate::triplane::{Aabb, TriPlaneSet};
use crate::Real;

pub const DEFORMATION_SET: &str = "deformation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Cells per side of every plane.
    pub resolution: usize,
    pub deformation_channels: usize,
    /// Plane values start uniform in `[-plane_init, plane_init]`.
    pub plane_init: Real,
    /// Multiplier on the fixed projection's init range.
    pub deformation_scale: Real,
    pub bounds: Aabb,
    pub radiance: RadianceConfig,
    pub latent: LatentConfig,
    /// Seed of the fixed noise injected into latents before denoising.
    pub noise_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            deformation_channels: 32,
            plane_init: 0.1,
            deformation_scale: 1.0,
            bounds: Aabb::default(),
            radiance: RadianceConfig::default(),
            latent: LatentConfig::default(),
            noise_seed: 0x5eed,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.resolution < 2 {
            return Err(Error::invalid("plane resolution must be at least 2"));
        }
        if self.deformation_channels == 0 || self.radiance.density_channels == 0 {
            return Err(Error::invalid("plane sets need at least one channel"));
        }
        if !(self.plane_init >= 0.0 && self.plane_init.is_finite()) {
            return Err(Error::invalid("plane_init must be finite and non-negative"));
        }
        if !self.deformation_scale.is_finite() {
            return Err(Error::invalid("deformation_scale must be finite"));
        }
        Ok(())
    }

    pub fn layout(&self) -> PlaneLayout {
        PlaneLayout {
            resolution: self.resolution,
            channels: vec![
                self.deformation_channels,
                3 * crate::radiance::sh_bands(self.radiance.sh_order),
                self.radiance.density_channels,
            ],
        }
    }
}

/// Switches for the ablated variants of the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Sample points are taken to lie in canonical space already.
    pub no_deformation: bool,
    /// The latent refinement and its losses are switched off.
    pub no_diffusion: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub cfg: ModelConfig,
    pub deformation: TriPlaneSet,
    pub head: DeformationHead,
    pub radiance: RadianceFields,
    pub latent: LatentDiffusion,
}

impl SceneModel {
    /// Every component draws from its own stream of `seed`, so changing one
    /// part of the config leaves the others' initial values untouched.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let stream = |label: u64| -> SceneRng { derived(seed, label) };
        let deformation = TriPlaneSet::new(
            DEFORMATION_SET,
            cfg.resolution,
            cfg.deformation_channels,
            true,
            cfg.bounds,
            cfg.plane_init,
            &mut stream(1),
        )?;
        let head = DeformationHead::new(cfg.deformation_channels, cfg.deformation_scale, &mut stream(2));
        let radiance = RadianceFields::new(&cfg.radiance, cfg.resolution, cfg.bounds, cfg.plane_init, &mut stream(3))?;
        let latent = LatentDiffusion::new(&cfg.latent, cfg.layout(), &mut stream(4))?;
        Ok(Self {
            cfg: cfg.clone(),
            deformation,
            head,
            radiance,
            latent,
        })
    }

    /// The nine feature planes in tokenizer order.
    pub fn planes(&self) -> Vec<&Param> {
        [&self.deformation, &self.radiance.sh, &self.radiance.density.planes]
            .into_iter()
            .flat_map(|s| s.planes.iter().map(|p| &p.values))
            .collect()
    }

    pub fn plane_names(&self) -> Vec<String> {
        self.planes().into_iter().map(|p| p.name.clone()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn trainable_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

impl HasParams for SceneModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.deformation.params();
        v.extend(self.head.params());
        v.extend(self.radiance.params());
        v.extend(self.latent.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.deformation.params_mut();
        v.extend(self.head.params_mut());
        v.extend(self.radiance.params_mut());
        v.extend(self.latent.params_mut());
        v
    }
}
