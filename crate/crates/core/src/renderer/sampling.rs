use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::rng::SceneRng;
use crate::Real;

/// Depths along one ray with their interval lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<Real>,
    /// `depths[i + 1] - depths[i]`, and `far - depths[last]` for the last.
    pub deltas: Vec<Real>,
}

/// Midpoints of `n` equal bins over `[near, far]`, or one uniform jitter per
/// bin when `stratified`.
pub fn sample_depths(near: Real, far: Real, n: usize, stratified: bool, rng: Option<&mut SceneRng>) -> Result<RaySamples> {
    if !(near < far) || !near.is_finite() || !far.is_finite() {
        return Err(Error::invalid(format!("need near < far, got {near} and {far}")));
    }
    if n == 0 {
        return Err(Error::invalid("need at least one sample per ray"));
    }
    let bin = (far - near) / n as Real;
    let depths: Vec<Real> = match (stratified, rng) {
        (true, Some(rng)) => (0..n).map(|i| near + (i as Real + rng.random::<f64>() as Real) * bin).collect(),
        (true, None) => return Err(Error::invalid("stratified sampling needs a generator")),
        (false, _) => (0..n).map(|i| near + (i as Real + 0.5) * bin).collect(),
    };
    let mut deltas: Vec<Real> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(far - depths[n - 1]);
    Ok(RaySamples { depths, deltas })
}
