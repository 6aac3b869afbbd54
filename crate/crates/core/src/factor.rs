//! Random-coefficient market: the drift and volatility of the risky asset are
//! driven by a factor `Y` with `dY = μ_Y(Y)dt + σ_Y(Y)dW`. Under log utility
//! the value splits as `ln x + f(t, y)` and `f` has a Feynman–Kac
//! representation, estimated here by Monte Carlo.
//!
//! Boundedness of the coefficients is assumed, not checked.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::market::{path_rng, std_normal};
use crate::par::{map_paths, mean_stderr};
use crate::stats::{GaussianPolicy, TWO_PI};

type Coef = Box<dyn Fn(f64) -> f64 + Send + Sync>;

pub struct FactorModel {
    pub mu_of_y: Coef,
    pub sigma_of_y: Coef,
    pub mu_y_of_y: Coef,
    pub sigma_y_of_y: Coef,
    pub r: f64,
}

impl fmt::Debug for FactorModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FactorModel").field("r", &self.r).finish_non_exhaustive()
    }
}

impl FactorModel {
    pub fn new(
        mu_of_y: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma_of_y: impl Fn(f64) -> f64 + Send + Sync + 'static,
        mu_y_of_y: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma_y_of_y: impl Fn(f64) -> f64 + Send + Sync + 'static,
        r: f64,
    ) -> Result<Self> {
        if !r.is_finite() {
            return Err(invalid("r", "rate must be finite"));
        }
        Ok(Self {
            mu_of_y: Box::new(mu_of_y),
            sigma_of_y: Box::new(sigma_of_y),
            mu_y_of_y: Box::new(mu_y_of_y),
            sigma_y_of_y: Box::new(sigma_y_of_y),
            r,
        })
    }

    /// Constant asset coefficients and a frozen factor.
    pub fn constant(r: f64, mu: f64, sigma: f64) -> Result<Self> {
        Self::new(move |_| mu, move |_| sigma, |_| 0.0, |_| 0.0, r)
    }

    /// Ornstein–Uhlenbeck factor `dY = κ(ȳ − Y)dt + s dW` with the given
    /// asset coefficients.
    pub fn ornstein_uhlenbeck(
        r: f64,
        mu_of_y: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma_of_y: impl Fn(f64) -> f64 + Send + Sync + 'static,
        kappa: f64,
        mean: f64,
        vol: f64,
    ) -> Result<Self> {
        if !(kappa >= 0.0 && vol >= 0.0) {
            return Err(invalid("ou", "mean reversion and volatility must be non-negative"));
        }
        Self::new(mu_of_y, sigma_of_y, move |y| kappa * (mean - y), move |_| vol, r)
    }

    fn sigma_at(&self, y: f64) -> Result<f64> {
        let s = (self.sigma_of_y)(y);
        if s > 0.0 && s.is_finite() {
            Ok(s)
        } else {
            Err(invalid("sigma_of_y", format!("volatility must be positive, got {s} at y = {y}")))
        }
    }
}

/// Monte-Carlo settings for the Feynman–Kac estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McSettings {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
}

/// Reward rate `r + ½(μ(y)−r)²/σ²(y) + (m/2)ln(2πm/σ²(y))`. The entropy
/// term is dropped at `m = 0`.
pub fn h_of_y(y: f64, model: &FactorModel, m: f64) -> Result<f64> {
    let s = model.sigma_at(y)?;
    if !(m >= 0.0) {
        return Err(invalid("m", format!("exploration weight must be non-negative, got {m}")));
    }
    let s2 = s * s;
    let excess = (model.mu_of_y)(y) - model.r;
    let explore = if m == 0.0 { 0.0 } else { 0.5 * m * (TWO_PI * m / s2).ln() };
    Ok(model.r + 0.5 * excess * excess / s2 + explore)
}

/// Estimates `f(t, y) = E[∫_t^T h(Ỹ_s) ds | Ỹ_t = y]` with Euler–Maruyama
/// paths and a left-endpoint sum. Returns `(mean, stderr)`.
pub fn feynman_kac_f(t: f64, y: f64, m: f64, model: &FactorModel, horizon: f64, mc: &McSettings) -> Result<(f64, f64)> {
    if !(t < horizon) {
        if t == horizon {
            return Ok((0.0, 0.0));
        }
        return Err(invalid("t", format!("time {t} is past the horizon {horizon}")));
    }
    if mc.n_paths == 0 || mc.n_steps == 0 {
        return Err(invalid("mc", "need at least one path and one step"));
    }
    let dt = (horizon - t) / mc.n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let integrals: Vec<f64> = map_paths(mc.n_paths, |p| -> Result<f64> {
        let mut rng = path_rng(mc.seed, p as u64);
        let mut yy = y;
        let mut acc = 0.0;
        for _ in 0..mc.n_steps {
            acc += h_of_y(yy, model, m)? * dt;
            let sy = (model.sigma_y_of_y)(yy);
            // frozen factors need no draws
            let shock = if sy == 0.0 { 0.0 } else { sy * sqrt_dt * std_normal(&mut rng) };
            yy += (model.mu_y_of_y)(yy) * dt + shock;
        }
        Ok(acc)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    if integrals.len() == 1 {
        return Ok((integrals[0], 0.0));
    }
    Ok(mean_stderr(&integrals))
}

/// Optimal exploratory policy `N((μ(y)−r)/σ²(y), m/σ²(y))`.
pub fn factor_policy(y: f64, model: &FactorModel, m: f64) -> Result<GaussianPolicy> {
    let s = model.sigma_at(y)?;
    let s2 = s * s;
    GaussianPolicy::new(((model.mu_of_y)(y) - model.r) / s2, m / s2)
}

/// `ln x + f(t, y)` with the Monte-Carlo standard error of `f`.
pub fn factor_value(t: f64, x: f64, y: f64, m: f64, model: &FactorModel, horizon: f64, mc: &McSettings) -> Result<(f64, f64)> {
    if !(x > 0.0) {
        return Err(Error::NonPositiveWealth(x));
    }
    let (f, se) = feynman_kac_f(t, y, m, model, horizon, mc)?;
    Ok((x.ln() + f, se))
}
