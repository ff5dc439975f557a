use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear DDPM noise schedule. Timesteps are 1-based: `t = 1..=t_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_T_MAX: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// `beta_t` interpolates linearly from `beta_start` (t = 1) to `beta_end`
/// (t = t_max); `alpha_t = 1 - beta_t`, `alpha_bar_t = alpha_bar_{t-1} * alpha_t`.
pub fn build_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::arg("schedule needs t_max >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::arg(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let span = (t_max.max(2) - 1) as f64;
    let beta: Vec<f64> = (0..t_max)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut running = 1.0;
    for a in &alpha {
        running *= a;
        alpha_bar.push(running);
    }
    Ok(NoiseSchedule { t_max, beta, alpha, alpha_bar })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_T_MAX, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_max {
            return Err(Error::arg(format!("timestep {t} outside [1, {}]", self.t_max)));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check(t)?])
    }

    /// `alpha_bar_0` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}
