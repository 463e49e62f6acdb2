//! Bouncing-ball HMM experiment: data generation, exact inference oracles,
//! the VBEM baseline, wake-sleep SMC training, and evaluation metrics.

pub mod align;
pub mod ball;
pub mod dataset;
pub mod exact;
pub mod experiment;
pub mod vbem;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Point parameters of a Gaussian HMM with 2-d emissions and a shared,
/// known emission scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub initial: Vec<f64>,
    /// Row-stochastic, `transition[r][c] = P(z_{t+1} = c | z_t = r)`.
    pub transition: Vec<Vec<f64>>,
    pub means: Vec<[f64; 2]>,
    pub obs_sd: f64,
}

impl HmmParams {
    pub fn states(&self) -> usize {
        self.initial.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.states();
        let on_simplex = |row: &[f64]| {
            row.iter().all(|p| p.is_finite() && *p >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-12
        };
        if s == 0
            || self.transition.len() != s
            || self.means.len() != s
            || self.transition.iter().any(|r| r.len() != s)
        {
            return Err(Error::Shape(format!("HMM parameters for {s} states")));
        }
        if !on_simplex(&self.initial) || !self.transition.iter().all(|r| on_simplex(r)) {
            return Err(Error::InvalidParams("initial/transition rows must lie on the simplex".into()));
        }
        if !(self.obs_sd.is_finite() && self.obs_sd > 0.0) {
            return Err(Error::InvalidParams("obs_sd must be > 0".into()));
        }
        Ok(())
    }

    /// `log N(y; means[s], obs_sd² I)` for every step and state.
    pub fn log_emissions(&self, obs: &[[f64; 2]]) -> Vec<Vec<f64>> {
        obs.iter()
            .map(|y| {
                self.means
                    .iter()
                    .map(|m| gaussian_log_density(y, m, self.obs_sd))
                    .collect()
            })
            .collect()
    }
}

pub(crate) fn gaussian_log_density(y: &[f64; 2], mean: &[f64; 2], sd: f64) -> f64 {
    const LN_2PI: f64 = 1.837_877_066_409_345_3;
    let dx = (y[0] - mean[0]) / sd;
    let dy = (y[1] - mean[1]) / sd;
    -LN_2PI - 2.0 * sd.ln() - 0.5 * (dx * dx + dy * dy)
}
