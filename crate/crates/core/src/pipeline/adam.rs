use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{HasParams, NamedGrads};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<Real>,
    v: Vec<Real>,
    steps: u64,
}

/// Adam with per-parameter step counts, so parameters that only sometimes
/// receive gradients get correct bias correction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// Number of updates applied to each parameter so far.
    pub fn census(&self) -> BTreeMap<String, u64> {
        self.state.iter().map(|(k, s)| (k.clone(), s.steps)).collect()
    }

    /// Updates every trainable parameter that has a gradient in `grads`.
    pub fn step(&mut self, model: &mut impl HasParams, grads: &NamedGrads, lr: impl Fn(&str) -> Real) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for p in model.params_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            if g.len() != p.value.len() {
                return Err(Error::shape("adam", format!("{}: {} gradients for {} values", p.name, g.len(), p.value.len())));
            }
            let s = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                steps: 0,
            });
            s.steps += 1;
            let c1 = 1.0 - beta1.powi(s.steps as i32);
            let c2 = 1.0 - beta2.powi(s.steps as i32);
            let rate = lr(&p.name);
            for (((x, gi), m), v) in p.value.data_mut().iter_mut().zip(g).zip(&mut s.m).zip(&mut s.v) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                *x -= rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
