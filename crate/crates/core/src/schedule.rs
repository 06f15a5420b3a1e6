//! Karras noise ladder and network preconditioning.
//!
//! Rung 0 is the noisiest level (`sigma_max`) and rung `steps - 1` is the
//! floor (`sigma_min`). Denoising moves from rung `n` to rung `n + 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub rho: f64,
    /// Number of noise levels `T`.
    pub steps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { sigma_min: 0.002, sigma_max: 80.0, sigma_data: 0.5, rho: 7.0, steps: 40 }
    }
}

impl ScheduleParams {
    pub fn with_steps(self, steps: usize) -> Self {
        Self { steps, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.sigma_min, self.sigma_max, self.sigma_data, self.rho];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config(format!("schedule parameters must be finite and positive: {self:?}")));
        }
        if self.sigma_min >= self.sigma_max {
            return Err(Error::config(format!(
                "sigma_min ({}) must be below sigma_max ({})",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.steps < 2 {
            return Err(Error::config(format!("need at least 2 noise levels, got {}", self.steps)));
        }
        Ok(())
    }

    /// Index of the last (least noisy) rung.
    pub fn floor_rung(&self) -> usize {
        self.steps - 1
    }
}

/// σ for rung `t` of the Karras ρ-schedule.
pub fn karras_sigma(t: usize, params: &ScheduleParams) -> Result<f64> {
    if t >= params.steps {
        return Err(Error::Index { index: t, len: params.steps });
    }
    // Pin the endpoints: the power round-trip is not exact in floating point.
    if t == 0 {
        return Ok(params.sigma_max);
    }
    if t == params.steps - 1 {
        return Ok(params.sigma_min);
    }
    let inv_rho = 1.0 / params.rho;
    let hi = params.sigma_max.powf(inv_rho);
    let lo = params.sigma_min.powf(inv_rho);
    let frac = t as f64 / (params.steps - 1) as f64;
    Ok((hi + frac * (lo - hi)).powf(params.rho))
}

/// Input, skip and output scalings at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecondCoeffs {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub sigma: f64,
}

/// EDM preconditioning used by the teacher denoiser.
pub fn precond_edm(sigma: f64, sigma_data: f64) -> Result<PrecondCoeffs> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    if !(sigma_data > 0.0) {
        return Err(Error::domain(format!("sigma_data must be positive, got {sigma_data}")));
    }
    let total = sigma * sigma + sigma_data * sigma_data;
    let root = total.sqrt();
    Ok(PrecondCoeffs {
        c_in: 1.0 / root,
        c_skip: sigma_data * sigma_data / total,
        c_out: sigma * sigma_data / root,
        sigma,
    })
}

/// Boundary-enforcing scalings for the consistency student.
///
/// Shifting by `sigma_min` makes `c_skip = 1` and `c_out = 0` exactly at the
/// schedule floor, so the student is the identity there.
pub fn precond_cm_boundary(sigma: f64, params: &ScheduleParams) -> Result<PrecondCoeffs> {
    if !(sigma >= params.sigma_min) || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma {sigma} below schedule floor {}", params.sigma_min)));
    }
    let sd2 = params.sigma_data * params.sigma_data;
    let shifted = sigma - params.sigma_min;
    let total = sigma * sigma + sd2;
    Ok(PrecondCoeffs {
        c_in: 1.0 / total.sqrt(),
        c_skip: sd2 / (shifted * shifted + sd2),
        c_out: shifted * params.sigma_data / total.sqrt(),
        sigma,
    })
}

/// Uniform draw of a training rung in `0..steps`.
pub fn sample_step_index<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> usize {
    rng.random_range(0..steps)
}

/// Precomputed ladder of σ values.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        params.validate()?;
        let sigmas = (0..params.steps).map(|t| karras_sigma(t, &params)).collect::<Result<Vec<_>>>()?;
        Ok(Self { params, sigmas })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, rung: usize) -> Result<f64> {
        self.sigmas.get(rung).copied().ok_or(Error::Index { index: rung, len: self.sigmas.len() })
    }

    /// Rung matching assistance level `alpha`: 0 is the floor, 1 is `sigma_max`.
    pub fn rung_for_alpha(&self, alpha: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::domain(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        let last = self.params.floor_rung();
        let offset = (alpha * last as f64).round() as usize;
        Ok(last - offset.min(last))
    }

    pub fn edm(&self, rung: usize) -> Result<PrecondCoeffs> {
        precond_edm(self.sigma(rung)?, self.params.sigma_data)
    }

    pub fn boundary(&self, rung: usize) -> Result<PrecondCoeffs> {
        precond_cm_boundary(self.sigma(rung)?, &self.params)
    }
}
