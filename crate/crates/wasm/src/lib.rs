//! Browser demo bindings: optimal policy densities, exploration-cost curves
//! and a terminal log-wealth histogram, each returned as an `(x, y)` series.

use explorer_core::closedform_log::{
    exploration_cost_constrained, exploration_cost_unconstrained, log_policy_constrained, log_policy_unconstrained,
    IntervalBounds,
};
use explorer_core::market::{rollout_batch, ConstantPolicy, SimGrid, Stepping};
use explorer_core::stats::TruncatedGaussianPolicy;
use explorer_core::{MarketParams, Result};
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

#[wasm_bindgen]
impl Series {
    #[wasm_bindgen(getter)]
    pub fn xs(&self) -> Vec<f64> {
        self.xs.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn ys(&self) -> Vec<f64> {
        self.ys.clone()
    }
}

impl Series {
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.ys.iter().copied())
    }
}

/// Market plus portfolio bounds; `±Infinity` ends mean no bound.
#[wasm_bindgen]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setup {
    r: f64,
    mu: f64,
    sigma: f64,
    a: f64,
    b: f64,
    horizon: f64,
}

#[wasm_bindgen]
impl Setup {
    #[wasm_bindgen(constructor)]
    pub fn new(r: f64, mu: f64, sigma: f64, a: f64, b: f64, horizon: f64) -> Setup {
        Setup { r, mu, sigma, a, b, horizon }
    }
}

impl Setup {
    fn market(&self) -> Result<MarketParams> {
        MarketParams::new(self.r, self.mu, self.sigma)
    }

    fn bounds(&self) -> Result<IntervalBounds> {
        IntervalBounds::new(self.a, self.b)
    }

    fn policy(&self, m: f64) -> Result<TruncatedGaussianPolicy> {
        let (mkt, b) = (self.market()?, self.bounds()?);
        if b.is_unbounded() {
            Ok(log_policy_unconstrained(&mkt, m)?.into())
        } else {
            log_policy_constrained(&mkt, m, &b)
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub mod demo {
    use super::*;

    /// Density of the optimal policy over the bulk of its support.
    pub fn policy_density(setup: &Setup, m: f64, points: usize) -> Result<Series> {
        let p = setup.policy(m)?;
        let sd = p.variance().sqrt();
        let lo = p.lower().max(p.mean() - 5.0 * sd);
        let hi = p.upper().min(p.mean() + 5.0 * sd);
        let xs = linspace(lo, hi, points);
        let ys = xs.iter().map(|&x| p.pdf(x)).collect();
        Ok(Series { xs, ys })
    }

    /// Exploration cost on a log-spaced grid of weights.
    pub fn cost_curve(setup: &Setup, m_min: f64, m_max: f64, points: usize) -> Result<Series> {
        let (mkt, b) = (setup.market()?, setup.bounds()?);
        if !(m_min > 0.0 && m_max > m_min) {
            return Err(explorer_core::Error::InvalidParameter {
                name: "m",
                reason: "need 0 < m_min < m_max".into(),
            });
        }
        let xs: Vec<f64> = linspace(m_min.ln(), m_max.ln(), points).into_iter().map(f64::exp).collect();
        let ys = xs
            .iter()
            .map(|&m| {
                if b.is_unbounded() {
                    Ok(exploration_cost_unconstrained(m, setup.horizon))
                } else {
                    exploration_cost_constrained(m, setup.horizon, &mkt, &b)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Series { xs, ys })
    }

    /// Normalised histogram of `ln X_T` (bin centres, densities).
    pub fn wealth_histogram(setup: &Setup, m: f64, paths: usize, bins: usize, seed: u64) -> Result<Series> {
        let mkt = setup.market()?;
        let grid = SimGrid::new(setup.horizon, setup.horizon / 250.0)?;
        let policy = ConstantPolicy::fraction(setup.policy(m)?);
        let logs: Vec<f64> = rollout_batch(&policy, &mkt, &grid, 1.0, seed, paths.max(1), Stepping::ExploratoryMoments)?
            .iter()
            .map(|p| p.terminal().ln())
            .collect();
        let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = bins.max(1);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for &v in &logs {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
        let scale = 1.0 / (logs.len() as f64 * width);
        Ok(Series {
            xs: (0..bins).map(|i| lo + (i as f64 + 0.5) * width).collect(),
            ys: counts.into_iter().map(|c| c as f64 * scale).collect(),
        })
    }
}

fn js(e: explorer_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = policyDensity)]
pub fn policy_density(setup: &Setup, m: f64, points: usize) -> std::result::Result<Series, JsError> {
    demo::policy_density(setup, m, points).map_err(js)
}

#[wasm_bindgen(js_name = costCurve)]
pub fn cost_curve(setup: &Setup, m_min: f64, m_max: f64, points: usize) -> std::result::Result<Series, JsError> {
    demo::cost_curve(setup, m_min, m_max, points).map_err(js)
}

#[wasm_bindgen(js_name = wealthHistogram)]
pub fn wealth_histogram(setup: &Setup, m: f64, paths: usize, bins: usize, seed: u64) -> std::result::Result<Series, JsError> {
    demo::wealth_histogram(setup, m, paths, bins, seed).map_err(js)
}
