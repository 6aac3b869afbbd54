//! Policy improvement: the Gaussian (Boltzmann) map from value derivatives to
//! a new policy, and exact values of constant Gaussian policies under log
//! utility.

use serde::{Deserialize, Serialize};

use crate::closedform_log::IntervalBounds;
use crate::error::{invalid, Error, Result};
use crate::market::MarketParams;
use crate::stats::{GaussianPolicy, TruncatedGaussianPolicy, LN_SQRT_2PI};

/// Wealth derivatives of a value function at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueDerivatives {
    pub vx: f64,
    pub vxx: f64,
}

impl ValueDerivatives {
    /// Derivatives of `ln x + c(t)`, shared by every constant Gaussian policy.
    pub fn log_family(x: f64) -> Self {
        Self {
            vx: 1.0 / x,
            vxx: -1.0 / (x * x),
        }
    }
}

/// Improved policy `N(−(μ−r)x·vx/(σ²x²·vxx), −m/(σ²x²·vxx))`, truncated to `bounds` if given.
pub fn improve(
    x: f64,
    d: ValueDerivatives,
    mkt: &MarketParams,
    m: f64,
    bounds: Option<&IntervalBounds>,
) -> Result<TruncatedGaussianPolicy> {
    if !(d.vxx < 0.0) {
        return Err(Error::NotConcave(d.vxx));
    }
    if !(m > 0.0 && m.is_finite()) {
        return Err(invalid("m", format!("exploration weight must be positive, got {m}")));
    }
    let curv = mkt.sigma * mkt.sigma * x * x * d.vxx;
    let mean = -(mkt.mu - mkt.r) * x * d.vx / curv;
    let var = -m / curv;
    let (lo, hi) = bounds.map_or((f64::NEG_INFINITY, f64::INFINITY), |b| (b.a, b.b));
    TruncatedGaussianPolicy::new(mean, var, lo, hi)
}

/// Exact value of holding the constant Gaussian fraction policy `pol` under
/// log utility, entropy bonus included.
pub fn gaussian_policy_value_log(pol: &GaussianPolicy, t: f64, x: f64, m: f64, mkt: &MarketParams, horizon: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::NonPositiveWealth(x));
    }
    let growth = mkt.r + (mkt.mu - mkt.r) * pol.mean - 0.5 * mkt.sigma * mkt.sigma * pol.second_moment();
    let entropy = 0.5 + LN_SQRT_2PI + 0.5 * pol.var.ln();
    Ok(x.ln() + (growth + m * entropy) * (horizon - t))
}

/// Iterates [`improve`] from `pol0` using the log-family derivatives.
///
/// Every constant Gaussian policy has value `ln x + c(t)`, so the first
/// iterate is already optimal; the loop stops once consecutive iterates agree
/// to 1e-12 in mean and variance, or after `max_iter` steps.
pub fn improvement_iteration_log(
    pol0: &GaussianPolicy,
    m: f64,
    mkt: &MarketParams,
    bounds: Option<&IntervalBounds>,
    max_iter: usize,
) -> Result<Vec<TruncatedGaussianPolicy>> {
    // Any positive wealth gives the same map.
    let x = 1.0;
    let mut iterates = vec![pol0.untruncated()];
    let mut prev = (pol0.mean, pol0.var);
    for _ in 0..max_iter {
        let next = improve(x, ValueDerivatives::log_family(x), mkt, m, bounds)?;
        let cur = (next.loc(), next.parent_var());
        iterates.push(next);
        if (cur.0 - prev.0).abs() < 1e-12 && (cur.1 - prev.1).abs() < 1e-12 {
            break;
        }
        prev = cur;
    }
    Ok(iterates)
}
