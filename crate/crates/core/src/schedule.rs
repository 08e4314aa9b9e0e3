//! Noise-level discretization and the forward perturbation kernel.
//!
//! Time and noise level coincide (`sigma(t) = t`), so the schedule doubles as
//! the time grid for every sampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Rng;
use crate::sources::SourceArray;

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;
pub const DEFAULT_SIGMA_MAX: f64 = 1.0;
pub const DEFAULT_RHO: f64 = 7.0;

/// `sigmas[0] = 0 < sigmas[1] = sigma_min < ... < sigmas[I] = sigma_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    sigmas: Vec<f64>,
    sigma_min: f64,
    sigma_max: f64,
    rho: f64,
}

impl Schedule {
    /// Polynomial (`rho`) interpolation between `sigma_max` and `sigma_min`
    /// over `steps` levels, with a terminal zero appended at index 0.
    pub fn new(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::BadRange(format!("need at least 2 steps, got {steps}")));
        }
        if !(sigma_min > 0.0 && sigma_min.is_finite()) {
            return Err(Error::BadRange(format!("sigma_min must be positive, got {sigma_min}")));
        }
        if !(sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::BadRange(format!(
                "sigma_min ({sigma_min}) must be below sigma_max ({sigma_max})"
            )));
        }
        if !(rho >= 1.0 && rho.is_finite()) {
            return Err(Error::BadRange(format!("rho must be >= 1, got {rho}")));
        }
        let inv = 1.0 / rho;
        let hi = sigma_max.powf(inv);
        let lo = sigma_min.powf(inv);
        let mut sigmas = Vec::with_capacity(steps + 1);
        sigmas.push(0.0);
        for i in 1..=steps {
            let frac = (steps - i) as f64 / (steps - 1) as f64;
            sigmas.push((hi + frac * (lo - hi)).powf(rho));
        }
        sigmas[1] = sigma_min;
        sigmas[steps] = sigma_max;
        Ok(Schedule {
            sigmas,
            sigma_min,
            sigma_max,
            rho,
        })
    }

    /// 150 steps between 1e-4 and 1 with `rho = 7`.
    pub fn paper_default() -> Self {
        Schedule::new(150, DEFAULT_SIGMA_MIN, DEFAULT_SIGMA_MAX, DEFAULT_RHO)
            .expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

/// Draws from the forward kernel `N(x0, sigma^2 I)`.
pub fn perturb(x0: &SourceArray, sigma: f64, rng: &mut Rng) -> SourceArray {
    let mut out = x0.clone();
    if sigma != 0.0 {
        for v in out.as_mut_slice() {
            *v += sigma * rng.normal();
        }
    }
    out
}
