//! Noise schedule and closed-form diffusion arithmetic.
//!
//! Steps are 1-based: `betas[t-1]` is the variance added at step `t`, and
//! `alpha_bar(0) = 1` so that every operation accepts `t - 1 = 0` as the clean
//! label.

use ndarray::{Array, Dimension, Zip};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 20.0;

/// Precomputed few-step variance schedule. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    timesteps: usize,
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// Length `T + 1`, `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the schedule
    /// `beta_t = 1 - exp(-beta_min / T - (beta_max - beta_min) (2t - 1) / (2 T^2))`.
    pub fn new(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::config("diffusion.timesteps", "must be at least 1"));
        }
        if !(beta_min.is_finite() && beta_min > 0.0) {
            return Err(Error::config("diffusion.beta_min", "must be positive"));
        }
        if !(beta_max.is_finite() && beta_max >= beta_min) {
            return Err(Error::config(
                "diffusion.beta_max",
                "must be finite and not below beta_min",
            ));
        }
        let steps = timesteps as f64;
        let betas: Vec<f64> = (1..=timesteps)
            .map(|t| {
                let exponent = beta_min / steps
                    + 0.5 * (beta_max - beta_min) * (2.0 * t as f64 - 1.0) / (steps * steps);
                -(-exponent).exp_m1()
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(timesteps + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        let posterior_vars = (1..=timesteps)
            .map(|t| (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t - 1])
            .collect();
        Ok(Self {
            timesteps,
            beta_min,
            beta_max,
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn with_default_bounds(timesteps: usize) -> Result<Self> {
        Self::new(timesteps, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::Index(format!(
                "diffusion step {t} outside 1..={}",
                self.timesteps
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alphas[t - 1])
    }

    /// Cumulative signal fraction; valid for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Index(format!("alpha_bar index {t} outside 0..={}", self.timesteps)))
    }

    /// Posterior variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.posterior_vars[t - 1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Coefficients `(c_xt, c_x0)` of the posterior mean
    /// `c_xt * x_t + c_x0 * x0_hat` at step `t`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        if t == 1 {
            // abar_0 = 1 and 1 - abar_1 = beta_1; the quotient is not exactly 1 in floating point.
            return Ok((0.0, 1.0));
        }
        let beta = self.betas[t - 1];
        let alpha = self.alphas[t - 1];
        let abar = self.alpha_bars[t];
        let abar_prev = self.alpha_bars[t - 1];
        let c_xt = alpha.sqrt() * (1.0 - abar_prev) / (1.0 - abar);
        let c_x0 = abar_prev.sqrt() * beta / (1.0 - abar);
        Ok((c_xt, c_x0))
    }

    /// Marginal draw `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` for `0 <= t <= T`.
    pub fn marginal<F: Real, D: Dimension>(
        &self,
        x0: &Array<F, D>,
        t: usize,
        eps: &Array<F, D>,
    ) -> Result<Array<F, D>> {
        let abar = self.alpha_bar(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Shape(format!(
                "noise {:?} does not match label {:?}",
                eps.shape(),
                x0.shape()
            )));
        }
        if t == 0 {
            return Ok(x0.clone());
        }
        let signal = F::from_f64(abar.sqrt()).unwrap();
        let noise = F::from_f64((1.0 - abar).sqrt()).unwrap();
        Ok(Zip::from(x0)
            .and(eps)
            .map_collect(|&x, &e| signal * x + noise * e))
    }

    /// `q(x_t | x0)` at a step `1 <= t <= T`.
    pub fn forward_sample<F: Real, D: Dimension>(
        &self,
        x0: &Array<F, D>,
        t: usize,
        eps: &Array<F, D>,
    ) -> Result<Array<F, D>> {
        self.check_step(t)?;
        self.marginal(x0, t, eps)
    }

    /// The label one step earlier, `q(x_{t-1} | x0)`, reusing `eps`. Step 0 is the identity.
    pub fn forward_reparam_prev<F: Real, D: Dimension>(
        &self,
        x0: &Array<F, D>,
        t: usize,
        eps: &Array<F, D>,
    ) -> Result<Array<F, D>> {
        self.check_step(t)?;
        self.marginal(x0, t - 1, eps)
    }

    /// Deterministic reverse step: the posterior mean of `q(x_{t-1} | x_t, x0_hat)`.
    pub fn posterior_step<F: Real, D: Dimension>(
        &self,
        x_t: &Array<F, D>,
        x0_hat: &Array<F, D>,
        t: usize,
    ) -> Result<Array<F, D>> {
        let (c_xt, c_x0) = self.posterior_coefficients(t)?;
        if x_t.shape() != x0_hat.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} does not match state {:?}",
                x0_hat.shape(),
                x_t.shape()
            )));
        }
        let c_xt = F::from_f64(c_xt).unwrap();
        let c_x0 = F::from_f64(c_x0).unwrap();
        Ok(Zip::from(x_t)
            .and(x0_hat)
            .map_collect(|&a, &b| c_xt * a + c_x0 * b))
    }

    /// Posterior mean plus `sqrt(posterior_var) * z`, for the optional stochastic reverse step.
    pub fn posterior_step_noisy<F: Real, D: Dimension>(
        &self,
        x_t: &Array<F, D>,
        x0_hat: &Array<F, D>,
        t: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array<F, D>> {
        let mut mean = self.posterior_step(x_t, x0_hat, t)?;
        let sigma = F::from_f64(self.posterior_vars[t - 1].sqrt()).unwrap();
        if sigma > F::zero() {
            let noise: Array<F, D> = crate::rng::standard_normal(rng, mean.raw_dim());
            Zip::from(&mut mean).and(&noise).for_each(|m, &n| *m += sigma * n);
        }
        Ok(mean)
    }
}
