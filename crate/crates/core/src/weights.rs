//! Region weight generation: the decreasing weight function, four-level
//! schedules for labeled and unlabeled images, and the unsupervised-loss
//! warm-up.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Region;

pub const DEFAULT_BETA: f64 = 3.0;
pub const DEFAULT_DELTA_UNLABELED: f64 = 0.3;
pub const DEFAULT_DELTA_LABELED: f64 = 0.6;
pub const DEFAULT_LAMBDA_SCALE: f64 = 0.1;
pub const DEFAULT_LAMBDA_SHARPNESS: f64 = 5.0;

/// Upper end of the weight function's input range.
pub const PHI_DOMAIN_MAX: f64 = 2.0;

/// Monotonically decreasing map from `[0, 2]` to `[0, 1]` with value 1 at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecayFunction {
    /// `exp(-u^beta)`, `beta >= 1`
    GeneralizedGaussian { beta: f64 },
    /// `max(0, 1 - u/2)`
    Linear,
    /// `1 / (u + 1)`
    Reciprocal,
    /// `0.5 cos(u) + 0.5`
    Cosine,
}

impl Default for DecayFunction {
    fn default() -> Self {
        DecayFunction::GeneralizedGaussian { beta: DEFAULT_BETA }
    }
}

impl DecayFunction {
    pub fn generalized_gaussian(beta: f64) -> Result<Self> {
        if !(beta >= 1.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta = {beta} must be >= 1")));
        }
        Ok(DecayFunction::GeneralizedGaussian { beta })
    }

    /// Parses the names used in configuration files and on the command line.
    pub fn from_name(name: &str, beta: f64) -> Result<Self> {
        match name {
            "generalized-gaussian" | "gaussian" => Self::generalized_gaussian(beta),
            "linear" => Ok(DecayFunction::Linear),
            "reciprocal" => Ok(DecayFunction::Reciprocal),
            "cosine" => Ok(DecayFunction::Cosine),
            other => Err(Error::InvalidParameter(format!("unknown decay function '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecayFunction::GeneralizedGaussian { .. } => "generalized-gaussian",
            DecayFunction::Linear => "linear",
            DecayFunction::Reciprocal => "reciprocal",
            DecayFunction::Cosine => "cosine",
        }
    }

    pub fn eval(&self, u: f64) -> Result<f64> {
        phi(u, self)
    }
}

pub fn phi(u: f64, f: &DecayFunction) -> Result<f64> {
    if !(0.0..=PHI_DOMAIN_MAX).contains(&u) {
        return Err(Error::InvalidParameter(format!("phi input {u} outside [0, 2]")));
    }
    Ok(match *f {
        DecayFunction::GeneralizedGaussian { beta } => (-u.powf(beta)).exp(),
        DecayFunction::Linear => (1.0 - u / 2.0).max(0.0),
        DecayFunction::Reciprocal => 1.0 / (u + 1.0),
        DecayFunction::Cosine => 0.5 * u.cos() + 0.5,
    })
}

/// Which region receives the third and fourth weight levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    /// UC > US > DC > DS
    Unlabeled,
    /// UC > US > DS > DC
    Labeled,
}

impl Ordering {
    /// Regions in order of decreasing weight.
    pub fn ranked(self) -> [Region; 4] {
        match self {
            Ordering::Unlabeled => [Region::UC, Region::US, Region::DC, Region::DS],
            Ordering::Labeled => [Region::UC, Region::US, Region::DS, Region::DC],
        }
    }
}

/// Four region weights, indexed by [`Region`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSchedule {
    weights: [f64; 4],
    delta: Option<f64>,
    ordering: Option<Ordering>,
}

impl WeightSchedule {
    /// Arbitrary non-negative weights (homogeneous baselines, ablations).
    pub fn from_weights(weights: [f64; 4]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter(format!("weights {weights:?} must be finite and >= 0")));
        }
        Ok(Self { weights, delta: None, ordering: None })
    }

    /// All four regions weighted 1.
    pub fn uniform() -> Self {
        Self { weights: [1.0; 4], delta: None, ordering: None }
    }

    pub fn weight(&self, r: Region) -> f64 {
        self.weights[r.index()]
    }
    pub fn weights(&self) -> [f64; 4] {
        self.weights
    }
    pub fn delta(&self) -> Option<f64> {
        self.delta
    }
    pub fn ordering(&self) -> Option<Ordering> {
        self.ordering
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::from_weights(self.weights.map(|w| w * k))
    }
}

impl Index<Region> for WeightSchedule {
    type Output = f64;
    fn index(&self, r: Region) -> &f64 {
        &self.weights[r.index()]
    }
}

/// Samples the decay function at `0, delta, 2 delta, 3 delta` and assigns the
/// values to regions in the order given by `ordering`.
pub fn make_schedule(f: &DecayFunction, delta: f64, ordering: Ordering) -> Result<WeightSchedule> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!("delta = {delta} must be > 0")));
    }
    if 3.0 * delta > PHI_DOMAIN_MAX {
        return Err(Error::InvalidParameter(format!("3 * delta = {} exceeds 2", 3.0 * delta)));
    }
    let mut weights = [0.0; 4];
    for (level, region) in ordering.ranked().into_iter().enumerate() {
        weights[region.index()] = phi(level as f64 * delta, f)?;
    }
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "delta = {delta} drives a {} weight to zero",
            f.name()
        )));
    }
    Ok(WeightSchedule { weights, delta: Some(delta), ordering: Some(ordering) })
}

/// Gaussian ramp-up `scale * exp(-sharpness * (1 - t/t_max)^2)`; `t` beyond
/// `t_max` is clamped.
pub fn lambda_warmup_with(t: u32, t_max: u32, scale: f64, sharpness: f64) -> Result<f64> {
    if t_max == 0 {
        return Err(Error::InvalidParameter("t_max must be >= 1".into()));
    }
    let frac = 1.0 - t.min(t_max) as f64 / t_max as f64;
    Ok(scale * (-sharpness * frac * frac).exp())
}

pub fn lambda_warmup(t: u32, t_max: u32) -> Result<f64> {
    lambda_warmup_with(t, t_max, DEFAULT_LAMBDA_SCALE, DEFAULT_LAMBDA_SHARPNESS)
}

/// Polynomial learning-rate decay `lr0 * (1 - progress)^0.9`.
pub fn poly_lr(lr0: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = 1.0 - (step.min(total_steps) as f64 / total_steps as f64);
    lr0 * frac.powf(0.9)
}
