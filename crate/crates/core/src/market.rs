//! Black–Scholes market, Merton quantities and seeded wealth simulation.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats::TruncatedGaussianPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl MarketParams {
    /// Rejects non-positive volatility; `mu <= r` is allowed but logged.
    pub fn new(r: f64, mu: f64, sigma: f64) -> Result<Self> {
        let mkt = Self { r, mu, sigma };
        mkt.validate()?;
        Ok(mkt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid("sigma", format!("must be positive, got {}", self.sigma)));
        }
        if !(self.r.is_finite() && self.mu.is_finite()) {
            return Err(invalid("mu/r", "must be finite"));
        }
        if self.mu <= self.r {
            log::warn!("market drift {} does not exceed the risk-free rate {}", self.mu, self.r);
        }
        Ok(())
    }

    /// Market of the logarithmic-utility experiments: r = 3%, μ = 8%, σ = 30%.
    pub fn log_experiment() -> Self {
        Self {
            r: 0.03,
            mu: 0.08,
            sigma: 0.3,
        }
    }

    /// Market of the quadratic-utility experiments: r = 2%, μ = 5%, σ = 30%.
    pub fn quadratic_experiment() -> Self {
        Self {
            r: 0.02,
            mu: 0.05,
            sigma: 0.3,
        }
    }

    pub fn merton_fraction(&self) -> f64 {
        (self.mu - self.r) / (self.sigma * self.sigma)
    }

    pub fn sharpe_ratio(&self) -> f64 {
        (self.mu - self.r) / self.sigma
    }

    /// Squared Sharpe ratio ρ².
    pub fn sharpe2(&self) -> f64 {
        let s = self.sharpe_ratio();
        s * s
    }
}

pub fn merton_fraction(mkt: &MarketParams) -> f64 {
    mkt.merton_fraction()
}

pub fn sharpe_ratio(mkt: &MarketParams) -> f64 {
    mkt.sharpe_ratio()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimGrid {
    pub horizon: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl SimGrid {
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && horizon > 0.0) {
            return Err(invalid("grid", format!("need dt > 0 and T > 0, got dt={dt}, T={horizon}")));
        }
        let n_steps = (horizon / dt).round() as usize;
        if n_steps == 0 || (n_steps as f64 * dt - horizon).abs() > 1e-12 {
            return Err(invalid("dt", format!("T = {horizon} is not a whole number of steps of {dt}")));
        }
        Ok(Self {
            horizon,
            dt,
            n_steps,
        })
    }

    /// One year at 250 trading days.
    pub fn daily_one_year() -> Self {
        Self::new(1.0, 1.0 / 250.0).expect("valid grid")
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            self.horizon * i as f64 / self.n_steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.time(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    /// One sampled action per step (`times.len() - 1` entries) when present.
    pub actions: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    pub fn terminal(&self) -> f64 {
        *self.states.last().expect("non-empty trajectory")
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.states.len() {
            return Err(Error::DimensionMismatch {
                expected: self.times.len(),
                got: self.states.len(),
            });
        }
        if let Some(a) = &self.actions {
            if a.len() != self.n_steps() {
                return Err(Error::DimensionMismatch {
                    expected: self.n_steps(),
                    got: a.len(),
                });
            }
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("times", "must be strictly increasing"));
        }
        if self.states.iter().any(|x| !x.is_finite()) {
            return Err(invalid("states", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    /// `x·exp((drift − ½vol2)dt + √(vol2·dt)·z)`; both coefficients are per unit wealth.
    ExactLognormal,
    /// `x + drift·dt + √vol2·√dt·z`; coefficients are absolute.
    Euler,
}

/// One step of the exploratory wealth SDE.
pub fn step_exploratory(x: f64, drift_coef: f64, vol2_coef: f64, dt: f64, z: f64, mode: StepMode) -> Result<f64> {
    if vol2_coef < 0.0 {
        return Err(Error::NegativeVariance(vol2_coef));
    }
    if !(dt > 0.0) {
        return Err(invalid("dt", "must be positive"));
    }
    Ok(match mode {
        StepMode::ExactLognormal => x * ((drift_coef - 0.5 * vol2_coef) * dt + (vol2_coef * dt).sqrt() * z).exp(),
        StepMode::Euler => x + drift_coef * dt + (vol2_coef * dt).sqrt() * z,
    })
}

/// What the policy's action measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionUnits {
    /// Fraction of wealth in the risky asset (log utility); wealth stays positive.
    Fraction,
    /// Amount invested in the risky asset (quadratic utility); wealth may go negative.
    Amount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stepping {
    /// Drift and volatility averaged over the policy's analytic moments.
    #[default]
    ExploratoryMoments,
    /// Draw an action per step and step the classical dynamics with it.
    ActionSampled,
}

/// A feedback distribution map `(t, x) → policy`.
pub trait FeedbackPolicy {
    fn distribution(&self, t: f64, x: f64) -> Result<TruncatedGaussianPolicy>;

    fn units(&self) -> ActionUnits {
        ActionUnits::Fraction
    }
}

/// State-independent policy.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy {
    pub dist: TruncatedGaussianPolicy,
    pub units: ActionUnits,
}

impl ConstantPolicy {
    pub fn fraction(dist: impl Into<TruncatedGaussianPolicy>) -> Self {
        Self {
            dist: dist.into(),
            units: ActionUnits::Fraction,
        }
    }
}

impl FeedbackPolicy for ConstantPolicy {
    fn distribution(&self, _t: f64, _x: f64) -> Result<TruncatedGaussianPolicy> {
        Ok(self.dist)
    }

    fn units(&self) -> ActionUnits {
        self.units
    }
}

/// Wraps a closure as a feedback policy.
pub struct FnPolicy<F> {
    pub f: F,
    pub units: ActionUnits,
}

impl<F> FeedbackPolicy for FnPolicy<F>
where
    F: Fn(f64, f64) -> Result<TruncatedGaussianPolicy>,
{
    fn distribution(&self, t: f64, x: f64) -> Result<TruncatedGaussianPolicy> {
        (self.f)(t, x)
    }

    fn units(&self) -> ActionUnits {
        self.units
    }
}

/// Generator for one Monte-Carlo path: ChaCha8 keyed by `seed`, with the path
/// index selecting the stream, so any subset of paths can be regenerated
/// independently and serial/parallel runs agree.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Uniform variate in the open interval (0, 1).
pub fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // 53 random bits mapped to the centre of their bucket.
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Smallest window mass for which [`sample_action`] rejects from the parent.
pub const REJECTION_MIN_MASS: f64 = 0.25;

/// Draw from a (possibly truncated) Gaussian policy.
///
/// Windows holding at least a quarter of the parent mass use rejection from
/// the parent Gaussian; narrower windows use the inverse cdf.
pub fn sample_action<R: Rng + ?Sized>(dist: &TruncatedGaussianPolicy, rng: &mut R) -> f64 {
    if dist.normalizer() >= REJECTION_MIN_MASS {
        let sd = dist.parent_var().sqrt();
        loop {
            let a = dist.loc() + sd * std_normal(rng);
            if dist.contains(a) {
                return a;
            }
        }
    }
    dist.sample(open_uniform(rng))
}

/// One market transition from `(t, x)` under `dist`. Returns the new wealth and
/// the sampled action (action-sampled stepping only).
#[allow(clippy::too_many_arguments)]
pub(crate) fn transition<R: Rng + ?Sized>(
    mkt: &MarketParams,
    dist: &TruncatedGaussianPolicy,
    units: ActionUnits,
    stepping: Stepping,
    x: f64,
    dt: f64,
    rng: &mut R,
) -> (f64, Option<f64>) {
    let excess = mkt.mu - mkt.r;
    // `vol` is the risky exposure multiplying σ dW; signed when an action is drawn.
    let (mean, vol, action) = match stepping {
        Stepping::ExploratoryMoments => (dist.mean(), dist.second_moment().sqrt(), None),
        Stepping::ActionSampled => {
            let a = sample_action(dist, rng);
            (a, a, Some(a))
        }
    };
    let z = std_normal(rng);
    let sd = mkt.sigma * vol;
    let next = match units {
        ActionUnits::Fraction => {
            let drift = mkt.r + excess * mean;
            x * ((drift - 0.5 * sd * sd) * dt + sd * dt.sqrt() * z).exp()
        }
        ActionUnits::Amount => x + (mkt.r * x + excess * mean) * dt + sd * dt.sqrt() * z,
    };
    (next, action)
}

/// Simulate one path of the exploratory wealth process under `policy`.
pub fn rollout<P, R>(
    policy: &P,
    mkt: &MarketParams,
    grid: &SimGrid,
    x0: f64,
    rng: &mut R,
    stepping: Stepping,
) -> Result<Trajectory>
where
    P: FeedbackPolicy + ?Sized,
    R: Rng + ?Sized,
{
    let units = policy.units();
    if units == ActionUnits::Fraction && !(x0 > 0.0) {
        return Err(Error::NonPositiveWealth(x0));
    }
    let times = grid.times();
    let mut states = Vec::with_capacity(grid.n_steps + 1);
    let mut actions = match stepping {
        Stepping::ActionSampled => Some(Vec::with_capacity(grid.n_steps)),
        Stepping::ExploratoryMoments => None,
    };
    let mut x = x0;
    states.push(x);
    for i in 0..grid.n_steps {
        let dist = policy.distribution(times[i], x)?;
        let (next, a) = transition(mkt, &dist, units, stepping, x, times[i + 1] - times[i], rng);
        if let (Some(acts), Some(a)) = (actions.as_mut(), a) {
            acts.push(a);
        }
        x = next;
        states.push(x);
    }
    Ok(Trajectory {
        times,
        states,
        actions,
    })
}

/// `n_paths` independent rollouts, path `i` driven by `path_rng(seed, i)`.
pub fn rollout_batch<P>(
    policy: &P,
    mkt: &MarketParams,
    grid: &SimGrid,
    x0: f64,
    seed: u64,
    n_paths: usize,
    stepping: Stepping,
) -> Result<Vec<Trajectory>>
where
    P: FeedbackPolicy + Sync + ?Sized,
{
    crate::par::map_paths(n_paths, |i| {
        let mut rng = path_rng(seed, i as u64);
        rollout(policy, mkt, grid, x0, &mut rng, stepping)
    })
    .into_iter()
    .collect()
}

fn fmt_num(v: f64) -> String {
    crate::fmt::sig12(v)
}

/// Write trajectories as CSV with columns `path,t,x[,action]`.
///
/// The action column is present when every trajectory carries actions; the
/// action sampled at `t_i` is written on the row of `t_i`, and the terminal row
/// leaves it empty.
pub fn write_trajectories_csv<W: Write>(mut out: W, paths: &[Trajectory]) -> std::io::Result<()> {
    let with_actions = !paths.is_empty() && paths.iter().all(|p| p.actions.is_some());
    if with_actions {
        out.write_all(b"path,t,x,action\n")?;
    } else {
        out.write_all(b"path,t,x\n")?;
    }
    for (k, p) in paths.iter().enumerate() {
        for (i, (&t, &x)) in p.times.iter().zip(&p.states).enumerate() {
            write!(out, "{k},{},{}", fmt_num(t), fmt_num(x))?;
            if with_actions {
                let a = p.actions.as_ref().and_then(|a| a.get(i)).map(|&a| fmt_num(a));
                write!(out, ",{}", a.unwrap_or_default())?;
            }
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}
