//! Closed forms for quadratic utility `U(x) = Kx − ½εx²`.
//!
//! Actions are dollar amounts in the risky asset. Constraints are affine in
//! wealth, `u ∈ [−π^M x + a0(t), −π^M x + b0(t)]`, which makes the truncation
//! mass independent of wealth.
//!
//! The x-free part of the classical value is `+(K²/2ε)(1 − e^{−ρ²τ})`. That
//! is the sign that satisfies the HJB equation and the terminal condition;
//! with a minus the residual is `ρ²(K²/ε)e^{−ρ²τ}`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::market::MarketParams;
use crate::quad;
use crate::stats::{gaussian_mass, std_normal_pdf, TruncatedGaussianPolicy, MIN_NORMALIZER, TWO_PI};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct QuadUtilityParams {
    pub K: f64,
    pub eps: f64,
}

impl QuadUtilityParams {
    #[allow(non_snake_case)]
    pub fn new(K: f64, eps: f64) -> Result<Self> {
        let p = Self { K, eps };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.K > 0.0 && self.K.is_finite()) {
            return Err(invalid("K", format!("must be positive, got {}", self.K)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(invalid("eps", format!("must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn bliss(&self) -> f64 {
        self.K / self.eps
    }

    pub fn utility(&self, x: f64) -> f64 {
        self.K * x - 0.5 * self.eps * x * x
    }
}

impl Default for QuadUtilityParams {
    fn default() -> Self {
        Self { K: 1.0, eps: 1.0 }
    }
}

/// Piecewise-linear function of time, flat outside its knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    knots: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn new(mut knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(invalid("knots", "need at least one breakpoint"));
        }
        knots.sort_by(|l, r| l.0.total_cmp(&r.0));
        if knots.iter().any(|k| !k.0.is_finite() || k.1.is_nan()) {
            return Err(invalid("knots", "times must be finite and values not NaN"));
        }
        if knots.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(invalid("knots", "duplicate breakpoint time"));
        }
        if knots.len() > 1 && knots.iter().any(|k| k.1.is_infinite()) {
            return Err(invalid("knots", "infinite values only allowed in constant tables"));
        }
        Ok(Self { knots })
    }

    pub fn constant(v: f64) -> Self {
        Self { knots: vec![(0.0, v)] }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = &self.knots;
        if k.len() == 1 || t <= k[0].0 {
            return k[0].1;
        }
        let last = k[k.len() - 1];
        if t >= last.0 {
            return last.1;
        }
        let i = k.partition_point(|p| p.0 <= t);
        let (t0, v0) = k[i - 1];
        let (t1, v1) = k[i];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.knots.iter().map(|k| k.0)
    }
}

/// Offsets `a0(t) < b0(t)` of the affine constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineBounds {
    pub a0: PiecewiseLinear,
    pub b0: PiecewiseLinear,
}

impl AffineBounds {
    pub fn new(a0: PiecewiseLinear, b0: PiecewiseLinear) -> Result<Self> {
        let bounds = Self { a0, b0 };
        // The gap is linear between merged knots, so checking the knots suffices.
        for t in bounds.breakpoints() {
            if bounds.a0.eval(t) >= bounds.b0.eval(t) {
                return Err(invalid("affine", format!("a0 >= b0 at t = {t}")));
            }
        }
        Ok(bounds)
    }

    pub fn constant(a0: f64, b0: f64) -> Result<Self> {
        Self::new(PiecewiseLinear::constant(a0), PiecewiseLinear::constant(b0))
    }

    pub fn unbounded() -> Self {
        Self {
            a0: PiecewiseLinear::constant(f64::NEG_INFINITY),
            b0: PiecewiseLinear::constant(f64::INFINITY),
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.a0.breakpoints().chain(self.b0.breakpoints()).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }

    /// Amount bounds at `(t, x)`.
    pub fn at(&self, t: f64, x: f64, mkt: &MarketParams) -> (f64, f64) {
        let shift = -mkt.merton_fraction() * x;
        (shift + self.a0.eval(t), shift + self.b0.eval(t))
    }
}

fn check_m(m: f64) -> Result<()> {
    if m > 0.0 && m.is_finite() {
        Ok(())
    } else {
        Err(invalid("m", format!("exploration weight must be positive, got {m}")))
    }
}

fn check_time(t: f64, horizon: f64) -> Result<()> {
    if (0.0..=horizon).contains(&t) {
        Ok(())
    } else {
        Err(invalid("t", format!("must lie in [0, {horizon}], got {t}")))
    }
}

/// Growth exponent `ρ² − 2r` of the policy variance.
fn var_growth(mkt: &MarketParams) -> f64 {
    mkt.sharpe2() - 2.0 * mkt.r
}

/// Variance `(m/(εσ²))·e^{(ρ²−2r)τ}` of the unconstrained optimal policy.
fn policy_var(tau: f64, m: f64, mkt: &MarketParams, q: &QuadUtilityParams) -> f64 {
    m / (q.eps * mkt.sigma * mkt.sigma) * (var_growth(mkt) * tau).exp()
}

/// Policy mean shared by the constrained and unconstrained laws.
fn policy_loc(tau: f64, x: f64, mkt: &MarketParams, q: &QuadUtilityParams) -> f64 {
    (q.bliss() * (-mkt.r * tau).exp() - x) * mkt.merton_fraction()
}

/// Standardised offsets `(Q̃_a, Q̃_b)`.
fn q_tilde(t: f64, m: f64, mkt: &MarketParams, q: &QuadUtilityParams, affine: &AffineBounds, horizon: f64) -> (f64, f64) {
    let tau = horizon - t;
    let centre = q.bliss() * (-mkt.r * tau).exp() * mkt.merton_fraction();
    let inv_sd = policy_var(tau, m, mkt, q).sqrt().recip();
    ((affine.a0.eval(t) - centre) * inv_sd, (affine.b0.eval(t) - centre) * inv_sd)
}

/// Mass `f(t, m)` the unconstrained optimal policy puts on the admissible window.
pub fn quad_f(t: f64, m: f64, mkt: &MarketParams, q: &QuadUtilityParams, affine: &AffineBounds, horizon: f64) -> Result<f64> {
    check_m(m)?;
    check_time(t, horizon)?;
    let (a, b) = q_tilde(t, m, mkt, q, affine, horizon);
    Ok(gaussian_mass(a, b))
}

/// Splits `[t, T]` at the bound breakpoints and applies composite Simpson on
/// each piece, doubling `panels` until the total moves by less than 1e-8
/// relative.
fn integrate_in_time<F: Fn(f64) -> Result<f64>>(g: F, t: f64, horizon: f64, affine: &AffineBounds, panels: usize) -> Result<f64> {
    if t >= horizon {
        return Ok(0.0);
    }
    let mut cuts = vec![t];
    cuts.extend(affine.breakpoints().into_iter().filter(|&s| s > t && s < horizon));
    cuts.push(horizon);

    // Surface the first error instead of letting NaNs reach Simpson.
    let failure = std::cell::RefCell::new(None);
    let run = |n: usize| {
        cuts.windows(2)
            .map(|w| {
                quad::simpson(
                    |s| match g(s) {
                        Ok(v) => v,
                        Err(e) => {
                            failure.borrow_mut().get_or_insert(e);
                            0.0
                        }
                    },
                    w[0],
                    w[1],
                    n,
                )
            })
            .sum::<f64>()
    };
    let mut n = panels.max(2);
    let mut prev = run(n);
    const MAX_PANELS: usize = 1 << 16;
    loop {
        if n >= MAX_PANELS {
            log::warn!("time quadrature not converged at {n} panels");
            break;
        }
        n *= 2;
        let next = run(n);
        let settled = (next - prev).abs() <= 1e-8 * next.abs().max(f64::MIN_POSITIVE);
        prev = next;
        if settled {
            break;
        }
    }
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(prev),
    }
}

/// `F(t, m) = ∫_t^T ln f(s, m) ds`.
pub fn quad_log_mass_integral(
    t: f64,
    m: f64,
    mkt: &MarketParams,
    q: &QuadUtilityParams,
    affine: &AffineBounds,
    horizon: f64,
    quadrature_n: usize,
) -> Result<f64> {
    check_m(m)?;
    check_time(t, horizon)?;
    integrate_in_time(
        |s| {
            let f = quad_f(s, m, mkt, q, affine, horizon)?;
            if f < MIN_NORMALIZER {
                return Err(Error::DegenerateSupport(f));
            }
            Ok(f.ln())
        },
        t,
        horizon,
        affine,
        quadrature_n,
    )
}

pub fn quad_value_classical(t: f64, x: f64, mkt: &MarketParams, q: &QuadUtilityParams, horizon: f64) -> f64 {
    let tau = horizon - t;
    let rho2 = mkt.sharpe2();
    -0.5 * q.eps * x * x * (-(rho2 - 2.0 * mkt.r) * tau).exp() + q.K * x * (-(rho2 - mkt.r) * tau).exp()
        + q.K * q.K / (2.0 * q.eps) * (-(-rho2 * tau).exp_m1())
}

/// Exploration premium `(m/4)(ρ²−2r)τ² + (m/2)ln(2πm/(εσ²))τ` of the unconstrained problem.
fn exploration_terms(tau: f64, m: f64, mkt: &MarketParams, q: &QuadUtilityParams) -> f64 {
    0.25 * m * var_growth(mkt) * tau * tau + 0.5 * m * (TWO_PI * m / (q.eps * mkt.sigma * mkt.sigma)).ln() * tau
}

pub fn quad_value_unconstrained(t: f64, x: f64, m: f64, mkt: &MarketParams, q: &QuadUtilityParams, horizon: f64) -> Result<f64> {
    if m == 0.0 {
        return Ok(quad_value_classical(t, x, mkt, q, horizon));
    }
    check_m(m)?;
    Ok(quad_value_classical(t, x, mkt, q, horizon) + exploration_terms(horizon - t, m, mkt, q))
}

#[allow(clippy::too_many_arguments)]
pub fn quad_value_constrained(
    t: f64,
    x: f64,
    m: f64,
    mkt: &MarketParams,
    q: &QuadUtilityParams,
    affine: &AffineBounds,
    horizon: f64,
    quadrature_n: usize,
) -> Result<f64> {
    let base = quad_value_unconstrained(t, x, m, mkt, q, horizon)?;
    Ok(base + m * quad_log_mass_integral(t, m, mkt, q, affine, horizon, quadrature_n)?)
}

/// Optimal exploratory law in amount units, truncated when `affine` is given.
pub fn quad_policy(
    t: f64,
    x: f64,
    mkt: &MarketParams,
    q: &QuadUtilityParams,
    m: f64,
    affine: Option<&AffineBounds>,
    horizon: f64,
) -> Result<TruncatedGaussianPolicy> {
    check_m(m)?;
    let tau = horizon - t;
    let (lo, hi) = match affine {
        Some(a) => a.at(t, x, mkt),
        None => (f64::NEG_INFINITY, f64::INFINITY),
    };
    TruncatedGaussianPolicy::new(policy_loc(tau, x, mkt, q), policy_var(tau, m, mkt, q), lo, hi)
}

/// `mT/2 + m∫₀^T (Q̃_a φ(Q̃_a) − Q̃_b φ(Q̃_b)) / (2f) dt`.
///
/// The factor ½ is what the definition (classical value minus exploratory
/// value plus accumulated entropy) yields, as in the log-utility case. Exact
/// when the window contains the classical optimum.
pub fn quad_exploration_cost(
    m: f64,
    horizon: f64,
    mkt: &MarketParams,
    q: &QuadUtilityParams,
    affine: &AffineBounds,
    quadrature_n: usize,
) -> Result<f64> {
    check_m(m)?;
    let y_pdf = |y: f64| if y.is_finite() { y * std_normal_pdf(y) } else { 0.0 };
    let correction = integrate_in_time(
        |s| {
            let (a, b) = q_tilde(s, m, mkt, q, affine, horizon);
            let f = gaussian_mass(a, b);
            if f < MIN_NORMALIZER {
                return Err(Error::DegenerateSupport(f));
            }
            Ok((y_pdf(a) - y_pdf(b)) / f)
        },
        0.0,
        horizon,
        affine,
        quadrature_n,
    )?;
    Ok(0.5 * m * horizon + 0.5 * m * correction)
}

/// `E[X_T]` under the unconstrained optimal policy (independent of `m`).
pub fn quad_mean_terminal_wealth(x0: f64, mkt: &MarketParams, q: &QuadUtilityParams, horizon: f64) -> f64 {
    let k = q.bliss();
    k + (x0 * (mkt.r * horizon).exp() - k) * (-mkt.sharpe2() * horizon).exp()
}

/// Drift and volatility of wealth under the optimal exploratory policy.
pub fn quad_exploratory_sde_coeffs(
    t: f64,
    x: f64,
    mkt: &MarketParams,
    q: &QuadUtilityParams,
    m: f64,
    affine: Option<&AffineBounds>,
    horizon: f64,
) -> Result<(f64, f64)> {
    let p = quad_policy(t, x, mkt, q, m, affine, horizon)?;
    Ok((mkt.r * x + (mkt.mu - mkt.r) * p.mean(), mkt.sigma * p.second_moment().sqrt()))
}
