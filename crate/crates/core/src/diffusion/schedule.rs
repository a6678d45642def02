use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear beta schedule over timesteps `1..=T`; `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, BETA_START, BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidValue("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidValue(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidValue("every beta must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Variance of `q(x_prev | x_t, x_0)` for a jump from `t` to `t_prev`.
    pub fn posterior_variance(&self, t: usize, t_prev: usize) -> f64 {
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
    }

    /// Descending timesteps of an evenly spaced `count`-step stride ending at `T`.
    pub fn stride(&self, count: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if count == 0 || count > total {
            return Err(Error::InvalidValue(format!(
                "sampling steps must be in 1..={total}, got {count}"
            )));
        }
        let mut ts: Vec<usize> = (1..=count).map(|k| k * total / count).collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidValue(format!("timestep {t} exceeds T = {}", self.steps())));
        }
        Ok(())
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &Array3<f64>, t: usize, noise: &Array3<f64>) -> Result<Array3<f64>> {
    schedule.check_t(t)?;
    if x0.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} does not match sample shape {:?}",
            noise.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x0).and(noise).map_collect(|&x, &e| a * x + b * e))
}
