//! Closed forms for logarithmic utility, with and without a portfolio
//! constraint `π ∈ [a, b]`.
//!
//! `m` is the exploration weight. Passing `m = 0` routes every value function
//! to its non-exploratory counterpart instead of evaluating `ln 0`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::market::MarketParams;
use crate::stats::{gaussian_mass, std_normal_pdf, GaussianPolicy, TruncatedGaussianPolicy, TWO_PI};

/// Bounds on the risky fraction. Either side may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalBounds {
    pub a: f64,
    pub b: f64,
}

impl IntervalBounds {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if a.is_nan() || b.is_nan() || a >= b {
            return Err(invalid("bounds", format!("need a < b, got [{a}, {b}]")));
        }
        Ok(Self { a, b })
    }

    pub fn unbounded() -> Self {
        Self {
            a: f64::NEG_INFINITY,
            b: f64::INFINITY,
        }
    }

    /// No short selling, no borrowing.
    pub fn long_only_unlevered() -> Self {
        Self { a: 0.0, b: 1.0 }
    }

    pub fn is_unbounded(&self) -> bool {
        self.a == f64::NEG_INFINITY && self.b == f64::INFINITY
    }

    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.a, self.b)
    }
}

fn check_wealth(x: f64) -> Result<()> {
    if x > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveWealth(x))
    }
}

fn check_m(m: f64) -> Result<()> {
    if m >= 0.0 && m.is_finite() {
        Ok(())
    } else {
        Err(invalid("m", format!("exploration weight must be non-negative, got {m}")))
    }
}

fn check_m_positive(m: f64) -> Result<()> {
    if m > 0.0 && m.is_finite() {
        Ok(())
    } else {
        Err(invalid("m", format!("exploration weight must be positive, got {m}")))
    }
}

/// Per-unit-time exploration premium of the unconstrained problem, `(m/2)·ln(2πm/σ²)`.
fn entropy_rate(m: f64, mkt: &MarketParams) -> f64 {
    0.5 * m * (TWO_PI * m / (mkt.sigma * mkt.sigma)).ln()
}

/// Classical log-optimal growth rate `r + ρ²/2`.
fn merton_rate(mkt: &MarketParams) -> f64 {
    mkt.r + 0.5 * mkt.sharpe2()
}

pub fn merton_value(t: f64, x: f64, mkt: &MarketParams, horizon: f64) -> Result<f64> {
    check_wealth(x)?;
    Ok(x.ln() + merton_rate(mkt) * (horizon - t))
}

/// Optimal exploratory value `ln x + (r + ρ²/2)(T−t) + (m/2)ln(2πm/σ²)(T−t)`.
pub fn log_value_unconstrained(t: f64, x: f64, m: f64, mkt: &MarketParams, horizon: f64) -> Result<f64> {
    check_m(m)?;
    if m == 0.0 {
        return merton_value(t, x, mkt, horizon);
    }
    check_wealth(x)?;
    Ok(x.ln() + (merton_rate(mkt) + entropy_rate(m, mkt)) * (horizon - t))
}

/// `N(π^Merton, m/σ²)`, the same at every `(t, x)`.
pub fn log_policy_unconstrained(mkt: &MarketParams, m: f64) -> Result<GaussianPolicy> {
    check_m_positive(m)?;
    GaussianPolicy::new(mkt.merton_fraction(), m / (mkt.sigma * mkt.sigma))
}

/// Standardised bounds `((a−π^M)σ/√m, (b−π^M)σ/√m)`.
fn standardized(m: f64, mkt: &MarketParams, bounds: &IntervalBounds) -> (f64, f64) {
    let pm = mkt.merton_fraction();
    let k = mkt.sigma / m.sqrt();
    ((bounds.a - pm) * k, (bounds.b - pm) * k)
}

/// Mass `Z_{a,b}(m)` the unconstrained optimal policy puts on `[a, b]`.
pub fn z_ab(m: f64, mkt: &MarketParams, bounds: &IntervalBounds) -> f64 {
    let (a, b) = standardized(m, mkt, bounds);
    gaussian_mass(a, b)
}

pub fn log_value_constrained(
    t: f64,
    x: f64,
    m: f64,
    mkt: &MarketParams,
    horizon: f64,
    bounds: &IntervalBounds,
) -> Result<f64> {
    check_m(m)?;
    if m == 0.0 {
        return constrained_value_no_exploration(t, x, mkt, horizon, bounds);
    }
    let z = z_ab(m, mkt, bounds);
    if !(z >= crate::stats::MIN_NORMALIZER) {
        return Err(Error::DegenerateSupport(z));
    }
    Ok(log_value_unconstrained(t, x, m, mkt, horizon)? + m * z.ln() * (horizon - t))
}

/// `N(π^Merton, m/σ²)` truncated to the bounds.
pub fn log_policy_constrained(mkt: &MarketParams, m: f64, bounds: &IntervalBounds) -> Result<TruncatedGaussianPolicy> {
    check_m_positive(m)?;
    TruncatedGaussianPolicy::new(mkt.merton_fraction(), m / (mkt.sigma * mkt.sigma), bounds.a, bounds.b)
}

pub fn constrained_merton(mkt: &MarketParams, bounds: &IntervalBounds) -> f64 {
    bounds.clip(mkt.merton_fraction())
}

/// Growth shortfall `½σ²(y − π^M)²` of holding fraction `y` instead of Merton.
fn shortfall(y: f64, mkt: &MarketParams) -> f64 {
    let d = y - mkt.merton_fraction();
    0.5 * mkt.sigma * mkt.sigma * d * d
}

pub fn constrained_value_no_exploration(
    t: f64,
    x: f64,
    mkt: &MarketParams,
    horizon: f64,
    bounds: &IntervalBounds,
) -> Result<f64> {
    check_wealth(x)?;
    let p0 = constrained_merton(mkt, bounds);
    let rate = mkt.r + (mkt.mu - mkt.r) * p0 - 0.5 * p0 * p0 * mkt.sigma * mkt.sigma;
    Ok(x.ln() + rate * (horizon - t))
}

/// Value added by exploration on top of the non-exploratory constrained value.
pub fn exploration_premium_log(t: f64, m: f64, mkt: &MarketParams, horizon: f64, bounds: &IntervalBounds) -> Result<f64> {
    check_m_positive(m)?;
    let pm = mkt.merton_fraction();
    let z = z_ab(m, mkt, bounds);
    if !(z >= crate::stats::MIN_NORMALIZER) {
        return Err(Error::DegenerateSupport(z));
    }
    let clip_loss = if pm < bounds.a {
        shortfall(bounds.a, mkt)
    } else if pm > bounds.b {
        shortfall(bounds.b, mkt)
    } else {
        0.0
    };
    Ok((entropy_rate(m, mkt) + m * z.ln() + clip_loss) * (horizon - t))
}

pub fn exploration_cost_unconstrained(m: f64, horizon: f64) -> f64 {
    0.5 * m * horizon
}

/// `mT/2 + mT·(Aφ(A) − Bφ(B))/(2Z)`.
///
/// This equals the definitional cost (classical value minus the exploratory
/// value net of its entropy bonus) whenever `a ≤ π^M ≤ b`; outside that range
/// the definitional cost additionally carries the clipping shortfall.
pub fn exploration_cost_constrained(m: f64, horizon: f64, mkt: &MarketParams, bounds: &IntervalBounds) -> Result<f64> {
    check_m_positive(m)?;
    let (a, b) = standardized(m, mkt, bounds);
    let z = gaussian_mass(a, b);
    if !(z >= crate::stats::MIN_NORMALIZER) {
        return Err(Error::DegenerateSupport(z));
    }
    let ya = if a.is_finite() { a * std_normal_pdf(a) } else { 0.0 };
    let yb = if b.is_finite() { b * std_normal_pdf(b) } else { 0.0 };
    Ok(0.5 * m * horizon + m * horizon * (ya - yb) / (2.0 * z))
}
