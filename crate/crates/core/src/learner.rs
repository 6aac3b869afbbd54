//! Martingale actor-critic: parametric value functions `J^θ`, parametric
//! policies `λ^φ`, the policy-evaluation and policy-gradient estimators, and
//! the training loop.
//!
//! Conventions:
//! * [`Model::delta_theta`] returns the gradient of the PE loss, so the
//!   critic update is `θ ← θ − l(k)·η_θ·Δθ`.
//! * [`Model::delta_phi`] returns an estimate of `∂J/∂φ`, the gradient of the
//!   value, so the actor update is `φ ← φ + l(k)·η_φ·Δφ`.
//!
//! These are the printed Algorithm 1 updates with both gradients oriented so
//! that the critic error falls and the value rises.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::closedform_log::{z_ab, IntervalBounds};
use crate::closedform_quad::QuadUtilityParams;
use crate::error::{invalid, Error, Result};
use crate::market::{
    path_rng, rollout, sample_action, std_normal, ActionUnits, FeedbackPolicy, MarketParams, SimGrid, Stepping, Trajectory,
};
use crate::par::{map_paths, mean_stderr, pairwise_sum};
use crate::stats::{std_normal_pdf, TruncatedGaussianPolicy, LN_SQRT_2PI, TWO_PI};

/// Largest parameter dimension of any variant.
const MAX_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelVariant {
    LogUnconstrained,
    LogConstrained { bounds: IntervalBounds },
    Quadratic { quad: QuadUtilityParams },
}

impl ModelVariant {
    pub fn theta_dim(&self) -> usize {
        match self {
            Self::LogUnconstrained => 1,
            Self::LogConstrained { .. } => 2,
            Self::Quadratic { .. } => 3,
        }
    }

    pub fn phi_dim(&self) -> usize {
        match self {
            Self::Quadratic { .. } => 3,
            _ => 2,
        }
    }

    pub fn units(&self) -> ActionUnits {
        match self {
            Self::Quadratic { .. } => ActionUnits::Amount,
            _ => ActionUnits::Fraction,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::LogUnconstrained => "log-unconstrained",
            Self::LogConstrained { .. } => "log-constrained",
            Self::Quadratic { .. } => "quadratic",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::LogUnconstrained => Ok(()),
            Self::LogConstrained { bounds } => IntervalBounds::new(bounds.a, bounds.b).map(|_| ()),
            Self::Quadratic { quad } => quad.validate(),
        }
    }

    /// Coefficients at which `J^θ` equals the optimal value.
    pub fn true_theta(&self, mkt: &MarketParams, m: f64) -> Result<Vec<f64>> {
        let base = mkt.r + 0.5 * mkt.sharpe2() - m * mkt.sigma.ln();
        Ok(match self {
            Self::LogUnconstrained => vec![base],
            Self::LogConstrained { bounds } => {
                let z = z_ab(m, mkt, bounds);
                if !(z >= crate::stats::MIN_NORMALIZER) {
                    return Err(Error::DegenerateSupport(z));
                }
                vec![base, m * z.ln()]
            }
            Self::Quadratic { quad } => vec![
                0.5 * m * (TWO_PI * m / (quad.eps * mkt.sigma * mkt.sigma)).ln(),
                0.25 * m * (mkt.sharpe2() - 2.0 * mkt.r),
                mkt.sharpe2(),
            ],
        })
    }

    /// Coefficients at which `λ^φ` equals the optimal policy.
    pub fn true_phi(&self, mkt: &MarketParams, m: f64) -> Vec<f64> {
        let s2 = mkt.sigma * mkt.sigma;
        match self {
            Self::Quadratic { quad } => vec![mkt.merton_fraction(), (m / (quad.eps * s2)).ln(), mkt.sharpe2() - 2.0 * mkt.r],
            _ => vec![mkt.merton_fraction(), -s2.ln()],
        }
    }

    /// Starting policy when nothing else is given: loading 0.5 and a volatility
    /// guess of 0.25 (so `φ₂ = ln 16` for the log variants).
    pub fn default_phi(&self, m: f64) -> Vec<f64> {
        let guess = 0.25f64 * 0.25;
        match self {
            Self::Quadratic { .. } => vec![0.5, (m / guess).ln(), 0.0],
            _ => vec![0.5, (1.0 / guess).ln()],
        }
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub phi: Vec<f64>,
}

/// Everything the parametric families depend on besides `θ` and `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub variant: ModelVariant,
    pub mkt: MarketParams,
    pub m: f64,
    pub horizon: f64,
}

impl Model {
    pub fn new(variant: ModelVariant, mkt: MarketParams, m: f64, horizon: f64) -> Result<Self> {
        variant.validate()?;
        mkt.validate()?;
        if !(m > 0.0 && m.is_finite()) {
            return Err(invalid("m", format!("exploration weight must be positive, got {m}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("horizon", format!("must be positive, got {horizon}")));
        }
        Ok(Self { variant, mkt, m, horizon })
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_dim(self.variant.theta_dim(), theta.len())
    }

    fn check_phi(&self, phi: &[f64]) -> Result<()> {
        check_dim(self.variant.phi_dim(), phi.len())
    }

    /// `(m/2)·ln(2πm)`, the known part of the log-variant value rate.
    fn log_entropy_rate(&self) -> f64 {
        0.5 * self.m * (TWO_PI * self.m).ln()
    }

    /// `xe^{rτ} − K/ε`.
    fn bliss_gap(&self, tau: f64, x: f64, q: &QuadUtilityParams) -> f64 {
        x * (self.mkt.r * tau).exp() - q.bliss()
    }

    pub fn j_theta(&self, t: f64, x: f64, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        let tau = self.horizon - t;
        match &self.variant {
            ModelVariant::LogUnconstrained | ModelVariant::LogConstrained { .. } => {
                if !(x > 0.0) {
                    return Err(Error::NonPositiveWealth(x));
                }
                let rate: f64 = theta.iter().sum::<f64>() + self.log_entropy_rate();
                Ok(x.ln() + rate * tau)
            }
            ModelVariant::Quadratic { quad } => {
                let g = self.bliss_gap(tau, x, quad);
                Ok(-0.5 * quad.eps * g * g * (-theta[2] * tau).exp()
                    + quad.K * quad.K / (2.0 * quad.eps)
                    + theta[1] * tau * tau
                    + theta[0] * tau)
            }
        }
    }

    /// `h = ∂J^θ/∂θ`, the test function of the orthogonality conditions.
    pub fn test_function(&self, t: f64, x: f64, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let tau = self.horizon - t;
        Ok(match &self.variant {
            ModelVariant::LogUnconstrained => vec![tau],
            ModelVariant::LogConstrained { .. } => vec![tau, tau],
            ModelVariant::Quadratic { quad } => {
                let g = self.bliss_gap(tau, x, quad);
                vec![tau, tau * tau, 0.5 * quad.eps * g * g * (-theta[2] * tau).exp() * tau]
            }
        })
    }

    /// `∂h/∂θ`, row-major `n × n`.
    pub fn test_function_jacobian(&self, t: f64, x: f64, theta: &[f64]) -> Result<Vec<f64>> {
        let h = self.test_function(t, x, theta)?;
        let n = h.len();
        let mut jac = vec![0.0; n * n];
        if let ModelVariant::Quadratic { .. } = self.variant {
            jac[8] = -(self.horizon - t) * h[2];
        }
        Ok(jac)
    }

    /// `K/ε·e^{−rτ} − x`, the quadratic policy's mean per unit `φ₁`.
    fn quad_loading(&self, tau: f64, x: f64, q: &QuadUtilityParams) -> f64 {
        q.bliss() * (-self.mkt.r * tau).exp() - x
    }

    /// `λ^φ(·|t, x)`: fractions for the log variants, amounts for the quadratic one.
    pub fn policy_dist(&self, t: f64, x: f64, phi: &[f64]) -> Result<TruncatedGaussianPolicy> {
        self.check_phi(phi)?;
        let (lo, hi) = match &self.variant {
            ModelVariant::LogConstrained { bounds } => (bounds.a, bounds.b),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        };
        match &self.variant {
            ModelVariant::Quadratic { quad } => {
                let tau = self.horizon - t;
                TruncatedGaussianPolicy::new(self.quad_loading(tau, x, quad) * phi[0], (phi[1] + phi[2] * tau).exp(), lo, hi)
            }
            _ => TruncatedGaussianPolicy::new(phi[0], phi[1].exp() * self.m, lo, hi),
        }
    }

    /// Entropy of `λ^φ(·|t, ·)` in closed form.
    pub fn policy_entropy(&self, t: f64, phi: &[f64]) -> Result<f64> {
        self.check_phi(phi)?;
        let m = self.m;
        Ok(match &self.variant {
            ModelVariant::LogUnconstrained => 0.5 + 0.5 * (phi[1] + (TWO_PI * m).ln()),
            ModelVariant::LogConstrained { bounds } => {
                let t = Truncation::new(phi, m, bounds)?;
                (TWO_PI * m).sqrt().ln() + 0.5 * phi[1] + 0.5 + t.z.ln() + 0.5 * (t.a_pdf_a - t.b_pdf_b) / t.z
            }
            ModelVariant::Quadratic { .. } => 0.5 * (TWO_PI.ln() + 1.0 + phi[1] + phi[2] * (self.horizon - t)),
        })
    }

    /// `∂/∂φ ln λ^φ(action|t, x)`, truncation terms included.
    pub fn loglik_grad(&self, action: f64, t: f64, x: f64, phi: &[f64]) -> Result<Vec<f64>> {
        self.check_phi(phi)?;
        let m = self.m;
        match &self.variant {
            ModelVariant::LogUnconstrained => {
                let w = (-phi[1]).exp() / m;
                let y = action - phi[0];
                Ok(vec![y * w, -0.5 + 0.5 * y * y * w])
            }
            ModelVariant::LogConstrained { bounds } => {
                if action < bounds.a || action > bounds.b {
                    return Err(Error::OutsideSupport {
                        action,
                        lower: bounds.a,
                        upper: bounds.b,
                    });
                }
                let tr = Truncation::new(phi, m, bounds)?;
                let w = (-phi[1]).exp() / m;
                let y = action - phi[0];
                Ok(vec![y * w + tr.score_loc, -0.5 + 0.5 * y * y * w + tr.score_logvar])
            }
            ModelVariant::Quadratic { quad } => {
                let tau = self.horizon - t;
                let c = self.quad_loading(tau, x, quad);
                let w = (-phi[1] - phi[2] * tau).exp();
                let y = action - phi[0] * c;
                let s2 = -0.5 + 0.5 * y * y * w;
                Ok(vec![y * w * c, s2, s2 * tau])
            }
        }
    }

    pub fn true_theta(&self) -> Result<Vec<f64>> {
        self.variant.true_theta(&self.mkt, self.m)
    }

    pub fn true_phi(&self) -> Vec<f64> {
        self.variant.true_phi(&self.mkt, self.m)
    }

    /// Per-trajectory statistics of a recorded batch.
    fn batch_stats(&self, batch: &[Trajectory], theta: &[f64], phi: &[f64], need_actions: bool) -> Result<Vec<PathStats>> {
        self.check_theta(theta)?;
        self.check_phi(phi)?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (n, d) = (theta.len(), phi.len());
        batch
            .iter()
            .map(|tr| {
                tr.validate()?;
                let actions = match (&tr.actions, need_actions) {
                    (Some(a), _) => Some(a),
                    (None, true) => return Err(Error::MissingActions),
                    (None, false) => None,
                };
                let mut acc = PathStats::new(n, d);
                for i in 0..tr.n_steps() {
                    let (t0, t1) = (tr.times[i], tr.times[i + 1]);
                    let (x0, x1) = (tr.states[i], tr.states[i + 1]);
                    let j0 = self.j_theta(t0, x0, theta)?;
                    let mut step = Step {
                        dt: t1 - t0,
                        j0,
                        dj: self.j_theta(t1, x1, theta)? - j0,
                        entropy: self.policy_entropy(t0, phi)?,
                        ..Step::default()
                    };
                    step.h0[..n].copy_from_slice(&self.test_function(t0, x0, theta)?);
                    step.h1[..n].copy_from_slice(&self.test_function(t1, x1, theta)?);
                    let jac = self.test_function_jacobian(t0, x0, theta)?;
                    for k in 0..n {
                        step.dh[k][..n].copy_from_slice(&jac[k * n..(k + 1) * n]);
                    }
                    if let Some(acts) = actions {
                        let a = acts[i];
                        step.ln_pdf = self.policy_dist(t0, x0, phi)?.ln_pdf(a);
                        step.score[..d].copy_from_slice(&self.loglik_grad(a, t0, x0, phi)?);
                    }
                    acc.push(&step, self.m);
                }
                let last = tr.n_steps();
                acc.finish(self.j_theta(tr.times[last], tr.states[last], theta)?);
                Ok(acc)
            })
            .collect()
    }

    /// Gradient of the PE loss `|Ḡ|²`, where `Ḡ` is the batch mean of
    /// `G = Σᵢ hᵢ (J^θ(tᵢ₊₁, xᵢ₊₁) − J^θ(tᵢ, xᵢ) + m·entropyᵢ·Δt)`.
    pub fn delta_theta(&self, batch: &[Trajectory], theta: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let stats = self.batch_stats(batch, theta, phi, false)?;
        Ok(reduce(&stats, theta.len(), phi.len()).pe_grad(PeLoss::Orthogonality))
    }

    /// The PE loss `|Ḡ|²` itself.
    pub fn pe_loss(&self, batch: &[Trajectory], theta: &[f64], phi: &[f64]) -> Result<f64> {
        let stats = self.batch_stats(batch, theta, phi, false)?;
        Ok(reduce(&stats, theta.len(), phi.len()).pe_loss(PeLoss::Orthogonality))
    }

    /// Terminal-L² PE loss `mean Σᵢ (U(X_T) + m Σ_{k≥i} entropy_k Δt − J^θ(tᵢ, xᵢ))² Δt`.
    pub fn terminal_l2_loss(&self, batch: &[Trajectory], theta: &[f64], phi: &[f64]) -> Result<f64> {
        let stats = self.batch_stats(batch, theta, phi, false)?;
        Ok(reduce(&stats, theta.len(), phi.len()).pe_loss(PeLoss::TerminalL2))
    }

    pub fn terminal_l2_grad(&self, batch: &[Trajectory], theta: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let stats = self.batch_stats(batch, theta, phi, false)?;
        Ok(reduce(&stats, theta.len(), phi.len()).pe_grad(PeLoss::TerminalL2))
    }

    /// Policy-gradient estimate: batch mean of
    /// `Σᵢ [∂ln λ(πᵢ)·(ΔJᵢ − m ln λ(πᵢ) Δt) − m ∂ln λ(πᵢ) Δt]`.
    pub fn delta_phi(&self, batch: &[Trajectory], theta: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let stats = self.batch_stats(batch, theta, phi, true)?;
        Ok(reduce(&stats, theta.len(), phi.len()).pg)
    }
}

/// Truncation quantities of the constrained log policy.
struct Truncation {
    z: f64,
    a_pdf_a: f64,
    b_pdf_b: f64,
    /// `−∂ ln Z/∂φ₁`
    score_loc: f64,
    /// `−∂ ln Z/∂φ₂`
    score_logvar: f64,
}

impl Truncation {
    fn new(phi: &[f64], m: f64, bounds: &IntervalBounds) -> Result<Self> {
        let sd = (phi[1].exp() * m).sqrt();
        let dist = TruncatedGaussianPolicy::new(phi[0], sd * sd, bounds.a, bounds.b)?;
        let (a, b) = dist.standardized_bounds();
        let z = dist.normalizer();
        let pdf = |y: f64| if y.is_finite() { std_normal_pdf(y) } else { 0.0 };
        let ypdf = |y: f64| if y.is_finite() { y * std_normal_pdf(y) } else { 0.0 };
        Ok(Self {
            z,
            a_pdf_a: ypdf(a),
            b_pdf_b: ypdf(b),
            score_loc: (pdf(b) - pdf(a)) / (z * sd),
            score_logvar: 0.5 * (ypdf(b) - ypdf(a)) / z,
        })
    }
}

/// One transition as seen by the estimators.
#[derive(Debug, Clone, Copy, Default)]
struct Step {
    dt: f64,
    j0: f64,
    dj: f64,
    entropy: f64,
    h0: [f64; MAX_DIM],
    h1: [f64; MAX_DIM],
    dh: [[f64; MAX_DIM]; MAX_DIM],
    ln_pdf: f64,
    score: [f64; MAX_DIM],
}

/// Running per-path sums for both estimators.
#[derive(Debug, Clone, Copy)]
struct PathStats {
    n: usize,
    d: usize,
    g: [f64; MAX_DIM],
    jac: [[f64; MAX_DIM]; MAX_DIM],
    pg: [f64; MAX_DIM],
    // terminal-L² pieces: a_i = C_i + J_i with C_i the entropy bonus before step i
    bonus: f64,
    w: f64,
    wa: f64,
    wa2: f64,
    wh: [f64; MAX_DIM],
    wah: [f64; MAX_DIM],
    l2_loss: f64,
    l2_grad: [f64; MAX_DIM],
}

impl PathStats {
    fn new(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            g: [0.0; MAX_DIM],
            jac: [[0.0; MAX_DIM]; MAX_DIM],
            pg: [0.0; MAX_DIM],
            bonus: 0.0,
            w: 0.0,
            wa: 0.0,
            wa2: 0.0,
            wh: [0.0; MAX_DIM],
            wah: [0.0; MAX_DIM],
            l2_loss: 0.0,
            l2_grad: [0.0; MAX_DIM],
        }
    }

    #[inline]
    fn push(&mut self, s: &Step, m: f64) {
        let e = s.dj + m * s.entropy * s.dt;
        for k in 0..self.n {
            self.g[k] += s.h0[k] * e;
            for l in 0..self.n {
                self.jac[k][l] += s.dh[k][l] * e + s.h0[k] * (s.h1[l] - s.h0[l]);
            }
        }
        let adv = s.dj - m * s.ln_pdf * s.dt;
        for k in 0..self.d {
            self.pg[k] += s.score[k] * adv - m * s.score[k] * s.dt;
        }
        let a = self.bonus + s.j0;
        self.w += s.dt;
        self.wa += s.dt * a;
        self.wa2 += s.dt * a * a;
        for k in 0..self.n {
            self.wh[k] += s.dt * s.h0[k];
            self.wah[k] += s.dt * a * s.h0[k];
        }
        self.bonus += m * s.entropy * s.dt;
    }

    /// Closes the terminal-L² sums once `J(T, X_T) = U(X_T)` is known.
    fn finish(&mut self, j_terminal: f64) {
        let q = j_terminal + self.bonus;
        self.l2_loss = q * q * self.w - 2.0 * q * self.wa + self.wa2;
        for k in 0..self.n {
            self.l2_grad[k] = -2.0 * (q * self.wh[k] - self.wah[k]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeLoss {
    /// `|E[G]|²` with identity weighting.
    #[default]
    Orthogonality,
    /// Mean squared distance to the realised terminal value.
    TerminalL2,
}

/// Batch means of the per-path sums.
#[derive(Debug, Clone)]
struct BatchStats {
    g: Vec<f64>,
    jac: Vec<Vec<f64>>,
    pg: Vec<f64>,
    l2_loss: f64,
    l2_grad: Vec<f64>,
}

impl BatchStats {
    fn pe_grad(&self, loss: PeLoss) -> Vec<f64> {
        match loss {
            PeLoss::Orthogonality => {
                let n = self.g.len();
                (0..n).map(|l| 2.0 * (0..n).map(|k| self.jac[k][l] * self.g[k]).sum::<f64>()).collect()
            }
            PeLoss::TerminalL2 => self.l2_grad.clone(),
        }
    }

    fn pe_loss(&self, loss: PeLoss) -> f64 {
        match loss {
            PeLoss::Orthogonality => self.g.iter().map(|g| g * g).sum(),
            PeLoss::TerminalL2 => self.l2_loss,
        }
    }
}

fn reduce(stats: &[PathStats], n: usize, d: usize) -> BatchStats {
    let count = stats.len() as f64;
    let mean = |f: &dyn Fn(&PathStats) -> f64| pairwise_sum(&stats.iter().map(f).collect::<Vec<_>>()) / count;
    BatchStats {
        g: (0..n).map(|k| mean(&|s| s.g[k])).collect(),
        jac: (0..n).map(|k| (0..n).map(|l| mean(&|s| s.jac[k][l])).collect()).collect(),
        pg: (0..d).map(|k| mean(&|s| s.pg[k])).collect(),
        l2_loss: mean(&|s| s.l2_loss),
        l2_grad: (0..n).map(|k| mean(&|s| s.l2_grad[k])).collect(),
    }
}

/// `λ^φ` as a feedback policy for the market simulator.
#[derive(Debug, Clone)]
pub struct LearnedPolicy {
    pub model: Model,
    pub phi: Vec<f64>,
}

impl FeedbackPolicy for LearnedPolicy {
    fn distribution(&self, t: f64, x: f64) -> Result<TruncatedGaussianPolicy> {
        self.model.policy_dist(t, x, &self.phi)
    }

    fn units(&self) -> ActionUnits {
        self.model.variant.units()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParamInit {
    /// The true coefficients plus independent `N(0, std²)` noise.
    TrueWithNoise { std: f64 },
    Given { values: Vec<f64> },
    /// Only meaningful for `φ`: see [`ModelVariant::default_phi`].
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub eta_theta: f64,
    pub eta_phi: f64,
    pub iterations: usize,
    pub paths: usize,
    pub grid: SimGrid,
    pub x0: f64,
    pub decay: f64,
    pub seed: u64,
    pub theta_init: ParamInit,
    pub phi_init: ParamInit,
    pub pe_loss: PeLoss,
    /// Abort once any parameter exceeds this in magnitude.
    pub divergence_bound: f64,
}

impl LearnConfig {
    /// Log-utility constrained setting: daily steps over one year.
    pub fn log_defaults() -> Self {
        Self {
            eta_theta: 0.01,
            eta_phi: 0.001,
            iterations: 2000,
            paths: 1000,
            grid: SimGrid::daily_one_year(),
            x0: 1.0,
            decay: 0.51,
            seed: 0,
            theta_init: ParamInit::TrueWithNoise { std: 0.01 },
            phi_init: ParamInit::Default,
            pe_loss: PeLoss::Orthogonality,
            divergence_bound: 1e6,
        }
    }

    /// Quadratic-utility setting.
    pub fn quadratic_defaults() -> Self {
        Self {
            eta_phi: 0.01,
            iterations: 1000,
            x0: 0.5,
            ..Self::log_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_theta > 0.0 && self.eta_phi > 0.0) {
            return Err(invalid("eta", "learning rates must be positive"));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations", "need at least one iteration"));
        }
        if self.paths == 0 {
            return Err(invalid("paths", "need at least one path per iteration"));
        }
        if !(self.decay >= 0.0) {
            return Err(invalid("decay", "exponent must be non-negative"));
        }
        if !(self.divergence_bound > 0.0) {
            return Err(invalid("divergence_bound", "must be positive"));
        }
        Ok(())
    }

    /// `l(k) = k^{−decay}` for the 1-based outer iteration `k`.
    pub fn step_scale(&self, k: usize) -> f64 {
        (k as f64).powf(-self.decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub variant: ModelVariant,
    pub theta_init: Vec<f64>,
    pub phi_init: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    /// Row 0 holds the initial parameters; row `k` the parameters after update `k`.
    pub trace: Vec<TraceRow>,
}

impl TrainOutput {
    /// Component-wise mean of `θ` or `φ` over the last `window` rows.
    pub fn trailing_mean(&self, window: usize, theta: bool) -> Vec<f64> {
        let rows = &self.trace[self.trace.len().saturating_sub(window)..];
        let dim = if theta { self.theta.len() } else { self.phi.len() };
        (0..dim)
            .map(|k| rows.iter().map(|r| if theta { r.theta[k] } else { r.phi[k] }).sum::<f64>() / rows.len() as f64)
            .collect()
    }
}

/// Stream used for parameter-initialisation noise.
const INIT_STREAM: u64 = u64::MAX;

fn init_params(init: &ParamInit, truth: &[f64], default: &[f64], seed: u64, offset: usize) -> Result<Vec<f64>> {
    match init {
        ParamInit::Given { values } => {
            check_dim(truth.len(), values.len())?;
            Ok(values.clone())
        }
        ParamInit::Default => Ok(default.to_vec()),
        ParamInit::TrueWithNoise { std } => {
            let mut rng = path_rng(seed, INIT_STREAM);
            // θ noise is drawn first, φ noise after it.
            for _ in 0..offset {
                std_normal(&mut rng);
            }
            Ok(truth.iter().map(|v| v + std * std_normal(&mut rng)).collect())
        }
    }
}

/// RNG stream of path `p` in outer iteration `k`.
fn stream_id(k: usize, p: usize) -> u64 {
    ((k as u64) << 32) | p as u64
}

/// Per-iteration constants for the log-variant streaming kernel.
struct LogKernel {
    dist: TruncatedGaussianPolicy,
    rate: f64,
    entropy: f64,
    inv_var: f64,
    ln_pdf_const: f64,
    trunc_loc: f64,
    trunc_logvar: f64,
    sd: f64,
    rejection: bool,
    sqrt_dt: Vec<f64>,
}

impl LogKernel {
    /// Same draws, in the same order, as [`sample_action`].
    #[inline(always)]
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.rejection {
            loop {
                let a = self.dist.loc() + self.sd * std_normal(rng);
                if a >= self.dist.lower() && a <= self.dist.upper() {
                    return a;
                }
            }
        }
        sample_action(&self.dist, rng)
    }
}

/// Per-iteration tables for the quadratic streaming kernel, indexed by step.
struct QuadKernel {
    q: QuadUtilityParams,
    tau: Vec<f64>,
    growth: Vec<f64>,
    discount: Vec<f64>,
    decay: Vec<f64>,
    sd: Vec<f64>,
    inv_var: Vec<f64>,
    entropy: Vec<f64>,
    ln_pdf_const: Vec<f64>,
}

enum Kernel {
    Log(LogKernel),
    Quad(QuadKernel),
}

impl Kernel {
    fn build(model: &Model, theta: &[f64], phi: &[f64], times: &[f64]) -> Result<Self> {
        let horizon = model.horizon;
        Ok(match &model.variant {
            ModelVariant::Quadratic { quad } => {
                let tau: Vec<f64> = times.iter().map(|t| horizon - t).collect();
                let logvar: Vec<f64> = tau.iter().map(|t| phi[1] + phi[2] * t).collect();
                Kernel::Quad(QuadKernel {
                    q: *quad,
                    growth: tau.iter().map(|t| (model.mkt.r * t).exp()).collect(),
                    discount: tau.iter().map(|t| (-model.mkt.r * t).exp()).collect(),
                    decay: tau.iter().map(|t| (-theta[2] * t).exp()).collect(),
                    sd: logvar.iter().map(|v| v.exp().sqrt()).collect(),
                    inv_var: logvar.iter().map(|v| (-v).exp()).collect(),
                    entropy: tau.iter().map(|&t| model.policy_entropy(horizon - t, phi)).collect::<Result<_>>()?,
                    ln_pdf_const: logvar.iter().map(|v| -LN_SQRT_2PI - 0.5 * v).collect(),
                    tau,
                })
            }
            variant => {
                let dist = model.policy_dist(0.0, 1.0, phi)?;
                let (trunc_loc, trunc_logvar) = match variant {
                    ModelVariant::LogConstrained { bounds } => {
                        let t = Truncation::new(phi, model.m, bounds)?;
                        (t.score_loc, t.score_logvar)
                    }
                    _ => (0.0, 0.0),
                };
                Kernel::Log(LogKernel {
                    dist,
                    rate: theta.iter().sum::<f64>() + model.log_entropy_rate(),
                    entropy: model.policy_entropy(0.0, phi)?,
                    inv_var: 1.0 / dist.parent_var(),
                    ln_pdf_const: -0.5 * dist.parent_var().ln() - LN_SQRT_2PI - dist.normalizer().ln(),
                    trunc_loc,
                    trunc_logvar,
                    sd: dist.parent_var().sqrt(),
                    rejection: dist.normalizer() >= crate::market::REJECTION_MIN_MASS,
                    sqrt_dt: times.windows(2).map(|w| (w[1] - w[0]).sqrt()).collect(),
                })
            }
        })
    }
}

/// Simulates one path under `λ^φ` and folds it into [`PathStats`] without
/// storing it. Consumes random numbers exactly as [`rollout`] with
/// action-sampled stepping, so it sees the same path.
fn stream_path<R: Rng + ?Sized>(
    model: &Model,
    kernel: &Kernel,
    theta: &[f64],
    phi: &[f64],
    times: &[f64],
    x0: f64,
    rng: &mut R,
) -> PathStats {
    let mkt = &model.mkt;
    let m = model.m;
    let excess = mkt.mu - mkt.r;
    let (n, d) = (theta.len(), phi.len());
    let mut acc = PathStats::new(n, d);
    let mut step = Step::default();
    match kernel {
        Kernel::Log(k) => {
            let sqrt_dt = &k.sqrt_dt;
            // Every component of h is τ and ∂h/∂θ = 0, so the sums collapse to
            // scalars. Wealth is tracked in logs to avoid an exp/ln per step.
            let mut lx = x0.ln();
            let (mut g, mut jac, mut pg0, mut pg1) = (0.0, 0.0, 0.0, 0.0);
            let (mut bonus, mut w, mut wa, mut wa2, mut wh, mut wah) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            let bonus_rate = m * k.entropy;
            let half_s2 = 0.5 * mkt.sigma * mkt.sigma;
            for i in 0..times.len() - 1 {
                let dt = times[i + 1] - times[i];
                let tau0 = model.horizon - times[i];
                let tau1 = model.horizon - times[i + 1];
                let a = k.draw(rng);
                let z = std_normal(rng);
                let dlx = (mkt.r + excess * a - half_s2 * a * a) * dt + mkt.sigma * a * sqrt_dt[i] * z;
                let y = a - phi[0];
                let y2w = y * y * k.inv_var;
                let j0 = lx + k.rate * tau0;
                let dj = dlx + k.rate * (tau1 - tau0);
                g += tau0 * (dj + bonus_rate * dt);
                jac += tau0 * (tau1 - tau0);
                let ln_pdf = k.ln_pdf_const - 0.5 * y2w;
                let adv = dj - m * ln_pdf * dt - m * dt;
                pg0 += (y * k.inv_var + k.trunc_loc) * adv;
                pg1 += (-0.5 + 0.5 * y2w + k.trunc_logvar) * adv;
                let aa = bonus + j0;
                w += dt;
                wa += dt * aa;
                wa2 += dt * aa * aa;
                wh += dt * tau0;
                wah += dt * aa * tau0;
                bonus += bonus_rate * dt;
                lx += dlx;
            }
            for kk in 0..n {
                acc.g[kk] = g;
                acc.wh[kk] = wh;
                acc.wah[kk] = wah;
                for l in 0..n {
                    acc.jac[kk][l] = jac;
                }
            }
            acc.pg[0] = pg0;
            acc.pg[1] = pg1;
            acc.bonus = bonus;
            acc.w = w;
            acc.wa = wa;
            acc.wa2 = wa2;
            acc.finish(lx);
        }
        Kernel::Quad(k) => {
            let q = &k.q;
            let j = |i: usize, x: f64| {
                let g = x * k.growth[i] - q.bliss();
                let tau = k.tau[i];
                let h3 = 0.5 * q.eps * g * g * k.decay[i];
                (-h3 + q.K * q.K / (2.0 * q.eps) + theta[1] * tau * tau + theta[0] * tau, h3 * tau)
            };
            let mut x = x0;
            for i in 0..times.len() - 1 {
                let dt = times[i + 1] - times[i];
                let loading = q.bliss() * k.discount[i] - x;
                let a = loading * phi[0] + k.sd[i] * std_normal(rng);
                let z = std_normal(rng);
                let sd = mkt.sigma * a;
                let x1 = x + (mkt.r * x + excess * a) * dt + sd * dt.sqrt() * z;
                let (j0, h0) = j(i, x);
                let (j1, h1) = j(i + 1, x1);
                let (tau0, tau1) = (k.tau[i], k.tau[i + 1]);
                let y = a - phi[0] * loading;
                let s2 = -0.5 + 0.5 * y * y * k.inv_var[i];
                step.dt = dt;
                step.j0 = j0;
                step.dj = j1 - j0;
                step.entropy = k.entropy[i];
                step.h0 = [tau0, tau0 * tau0, h0];
                step.h1 = [tau1, tau1 * tau1, h1];
                step.dh[2][2] = -tau0 * h0;
                step.ln_pdf = k.ln_pdf_const[i] - 0.5 * y * y * k.inv_var[i];
                step.score = [y * k.inv_var[i] * loading, s2, s2 * tau0];
                acc.push(&step, m);
                x = x1;
            }
            let last = times.len() - 1;
            acc.finish(j(last, x).0);
        }
    }
    acc
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs the actor-critic loop. Deterministic given `cfg.seed`, whatever the
/// thread count.
pub fn train(model: &Model, cfg: &LearnConfig) -> Result<TrainOutput> {
    train_with(model, cfg, |_| {})
}

/// [`train`] with a callback after every update (progress reporting).
pub fn train_with<F: FnMut(&TraceRow)>(model: &Model, cfg: &LearnConfig, mut on_iter: F) -> Result<TrainOutput> {
    cfg.validate()?;
    if model.variant.units() == ActionUnits::Fraction && !(cfg.x0 > 0.0) {
        return Err(Error::NonPositiveWealth(cfg.x0));
    }
    if (cfg.grid.horizon - model.horizon).abs() > 1e-12 {
        return Err(invalid("grid", "grid horizon differs from the model horizon"));
    }
    let truth_theta = model.true_theta()?;
    let truth_phi = model.true_phi();
    let mut theta = init_params(&cfg.theta_init, &truth_theta, &truth_theta, cfg.seed, 0)?;
    let mut phi = init_params(&cfg.phi_init, &truth_phi, &model.variant.default_phi(model.m), cfg.seed, truth_theta.len())?;
    let (n, d) = (theta.len(), phi.len());
    let times = cfg.grid.times();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(TraceRow {
        iter: 0,
        theta: theta.clone(),
        phi: phi.clone(),
        grad_norm_theta: 0.0,
        grad_norm_phi: 0.0,
    });
    let theta_init = theta.clone();
    let phi_init = phi.clone();
    for k in 1..=cfg.iterations {
        let kernel = Kernel::build(model, &theta, &phi, &times)?;
        let stats = map_paths(cfg.paths, |p| {
            let mut rng = path_rng(cfg.seed, stream_id(k, p));
            stream_path(model, &kernel, &theta, &phi, &times, cfg.x0, &mut rng)
        });
        let batch = reduce(&stats, n, d);
        let d_theta = batch.pe_grad(cfg.pe_loss);
        let d_phi = batch.pg;
        let l = cfg.step_scale(k);
        for (t, g) in theta.iter_mut().zip(&d_theta) {
            *t -= l * cfg.eta_theta * g;
        }
        for (p, g) in phi.iter_mut().zip(&d_phi) {
            *p += l * cfg.eta_phi * g;
        }
        let magnitude = theta.iter().chain(&phi).fold(0.0f64, |acc, v| if v.is_nan() { f64::INFINITY } else { acc.max(v.abs()) });
        if magnitude > cfg.divergence_bound {
            return Err(Error::Divergence { iteration: k, magnitude });
        }
        let row = TraceRow {
            iter: k,
            theta: theta.clone(),
            phi: phi.clone(),
            grad_norm_theta: norm(&d_theta),
            grad_norm_phi: norm(&d_phi),
        };
        on_iter(&row);
        trace.push(row);
    }
    Ok(TrainOutput {
        variant: model.variant,
        theta_init,
        phi_init,
        theta,
        phi,
        trace,
    })
}

/// Rolls out the paths of iteration `k` of [`train`] explicitly (for checks
/// and exports).
pub fn iteration_batch(model: &Model, cfg: &LearnConfig, k: usize, phi: &[f64]) -> Result<Vec<Trajectory>> {
    let policy = LearnedPolicy { model: *model, phi: phi.to_vec() };
    map_paths(cfg.paths, |p| {
        let mut rng = path_rng(cfg.seed, stream_id(k, p));
        rollout(&policy, &model.mkt, &cfg.grid, cfg.x0, &mut rng, Stepping::ActionSampled)
    })
    .into_iter()
    .collect()
}

/// Writes `iter,theta1..,phi1..,grad_norm_theta,grad_norm_phi`.
pub fn write_trace_csv<W: Write>(mut out: W, trace: &[TraceRow]) -> std::io::Result<()> {
    let (n, d) = trace.first().map_or((0, 0), |r| (r.theta.len(), r.phi.len()));
    let mut header = vec!["iter".to_string()];
    header.extend((1..=n).map(|k| format!("theta{k}")));
    header.extend((1..=d).map(|k| format!("phi{k}")));
    header.push("grad_norm_theta".into());
    header.push("grad_norm_phi".into());
    writeln!(out, "{}", header.join(","))?;
    for r in trace {
        let mut fields = vec![r.iter.to_string()];
        fields.extend(r.theta.iter().chain(&r.phi).map(|v| crate::fmt::sig12(*v)));
        fields.push(crate::fmt::sig12(r.grad_norm_theta));
        fields.push(crate::fmt::sig12(r.grad_norm_phi));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Mean and standard error of the increment of
/// `Y_s = J(s, X_s) + m ∫₀ˢ entropy du` over one time bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketResidual {
    pub t_start: f64,
    pub t_end: f64,
    pub mean: f64,
    pub stderr: f64,
}

/// Martingale diagnostic: simulates `n_paths` under `policy` with the
/// exploratory (moment-averaged) dynamics and reports bucketed increments of
/// `Y`. For the true value function and policy every bucket mean is zero.
#[allow(clippy::too_many_arguments)]
pub fn martingale_residuals<J, P>(
    value: J,
    policy: &P,
    mkt: &MarketParams,
    grid: &SimGrid,
    m: f64,
    x0: f64,
    n_paths: usize,
    seed: u64,
    n_buckets: usize,
) -> Result<Vec<BucketResidual>>
where
    J: Fn(f64, f64) -> f64 + Sync,
    P: FeedbackPolicy + Sync + ?Sized,
{
    if n_buckets == 0 || n_buckets > grid.n_steps {
        return Err(invalid("n_buckets", format!("need 1..={} buckets, got {n_buckets}", grid.n_steps)));
    }
    if n_paths < 2 {
        return Err(invalid("n_paths", "need at least two paths for a standard error"));
    }
    let edges: Vec<usize> = (0..=n_buckets).map(|b| b * grid.n_steps / n_buckets).collect();
    let per_path: Vec<Vec<f64>> = map_paths(n_paths, |p| -> Result<Vec<f64>> {
        let mut rng = path_rng(seed, p as u64);
        let tr = rollout(policy, mkt, grid, x0, &mut rng, Stepping::ExploratoryMoments)?;
        // Y at every grid point
        let mut y = Vec::with_capacity(tr.times.len());
        let mut bonus = 0.0;
        for i in 0..tr.times.len() {
            y.push(value(tr.times[i], tr.states[i]) + bonus);
            if i + 1 < tr.times.len() {
                let h = policy.distribution(tr.times[i], tr.states[i])?.entropy();
                bonus += m * h * (tr.times[i + 1] - tr.times[i]);
            }
        }
        Ok(edges.windows(2).map(|w| y[w[1]] - y[w[0]]).collect())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let times = grid.times();
    Ok(edges
        .windows(2)
        .enumerate()
        .map(|(b, w)| {
            let xs: Vec<f64> = per_path.iter().map(|p| p[b]).collect();
            let (mean, stderr) = mean_stderr(&xs);
            BucketResidual {
                t_start: times[w[0]],
                t_end: times[w[1]],
                mean,
                stderr,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_con() -> Model {
        Model::new(
            ModelVariant::LogConstrained {
                bounds: IntervalBounds::long_only_unlevered(),
            },
            MarketParams::log_experiment(),
            0.01,
            1.0,
        )
        .unwrap()
    }

    fn log_unc() -> Model {
        Model::new(ModelVariant::LogUnconstrained, MarketParams::log_experiment(), 0.01, 1.0).unwrap()
    }

    fn quad() -> Model {
        Model::new(
            ModelVariant::Quadratic {
                quad: QuadUtilityParams::default(),
            },
            MarketParams::quadratic_experiment(),
            0.01,
            1.0,
        )
        .unwrap()
    }

    fn all() -> Vec<Model> {
        vec![log_unc(), log_con(), quad()]
    }

    #[test]
    fn true_parameters() {
        let th = log_con().true_theta().unwrap();
        assert!((th[0] - 0.055_929).abs() < 1e-6, "{th:?}");
        assert!((th[1] + 0.001_497).abs() < 1e-6);
        let ph = log_con().true_phi();
        assert!((ph[0] - 0.555_556).abs() < 1e-6 && (ph[1] - 2.407_946).abs() < 1e-6);
        let q = quad().true_theta().unwrap();
        assert!((q[0] + 0.001_797).abs() < 1e-6 && (q[1] + 0.000_075).abs() < 1e-9 && (q[2] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn value_families_match_closed_forms() {
        use crate::closedform_log::{log_value_constrained, log_value_unconstrained};
        use crate::closedform_quad::quad_value_unconstrained;
        let (t, x) = (0.3, 1.4);
        let m = log_con();
        let b = IntervalBounds::long_only_unlevered();
        let v = log_value_constrained(t, x, 0.01, &m.mkt, 1.0, &b).unwrap();
        assert!((m.j_theta(t, x, &m.true_theta().unwrap()).unwrap() - v).abs() < 1e-14);
        let u = log_unc();
        let v = log_value_unconstrained(t, x, 0.01, &u.mkt, 1.0).unwrap();
        assert!((u.j_theta(t, x, &u.true_theta().unwrap()).unwrap() - v).abs() < 1e-14);
        let q = quad();
        let qp = QuadUtilityParams::default();
        for &x in &[-0.3, 0.5, 2.0] {
            let v = quad_value_unconstrained(t, x, 0.01, &q.mkt, &qp, 1.0).unwrap();
            assert!((q.j_theta(t, x, &q.true_theta().unwrap()).unwrap() - v).abs() < 1e-14);
        }
        for m in all() {
            let th = m.true_theta().unwrap();
            let x: f64 = 0.7;
            let terminal = m.j_theta(1.0, x, &th).unwrap();
            let expect = if let ModelVariant::Quadratic { quad } = m.variant { quad.utility(x) } else { x.ln() };
            assert!((terminal - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn test_functions_are_theta_derivatives() {
        for m in all() {
            let th: Vec<f64> = m.true_theta().unwrap().iter().map(|v| v + 0.013).collect();
            for &(t, x) in &[(0.0, 0.5), (0.4, 1.3), (0.9, 0.2)] {
                let h = m.test_function(t, x, &th).unwrap();
                let jac = m.test_function_jacobian(t, x, &th).unwrap();
                let n = th.len();
                for k in 0..n {
                    let e = 1e-6;
                    let mut p = th.clone();
                    p[k] += e;
                    let mut q = th.clone();
                    q[k] -= e;
                    let fd = (m.j_theta(t, x, &p).unwrap() - m.j_theta(t, x, &q).unwrap()) / (2.0 * e);
                    assert!((fd - h[k]).abs() < 1e-8, "{} k={k}", m.variant.name());
                    let hp = m.test_function(t, x, &p).unwrap();
                    let hq = m.test_function(t, x, &q).unwrap();
                    for l in 0..n {
                        let fd = (hp[l] - hq[l]) / (2.0 * e);
                        assert!((fd - jac[l * n + k]).abs() < 1e-8);
                    }
                }
            }
        }
        assert_eq!(log_unc().test_function(0.25, 2.0, &[0.1]).unwrap(), vec![0.75]);
        assert_eq!(log_con().test_function(0.25, 2.0, &[0.1, 0.0]).unwrap(), vec![0.75, 0.75]);
    }

    #[test]
    fn dimension_checks() {
        let err = log_con().j_theta(0.0, 1.0, &[0.1]).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 2, got: 1 });
        assert!(quad().policy_dist(0.0, 1.0, &[0.1, 0.2]).is_err());
        assert!(log_unc().j_theta(0.0, -1.0, &[0.1]).is_err());
    }

    #[test]
    fn policy_families() {
        let m = log_unc();
        let p = m.policy_dist(0.0, 1.0, &m.true_phi()).unwrap();
        assert!((p.mean() - 0.555_556).abs() < 1e-6 && (p.variance() - 0.111_111).abs() < 1e-6);
        let q = quad();
        let qp = QuadUtilityParams::default();
        let x = qp.bliss() * (-q.mkt.r * 0.6).exp();
        assert!(q.policy_dist(0.4, x, &q.true_phi()).unwrap().mean().abs() < 1e-15);
        let opt = crate::closedform_quad::quad_policy(0.5, 0.5, &q.mkt, &qp, 0.01, None, 1.0).unwrap();
        let got = q.policy_dist(0.5, 0.5, &q.true_phi()).unwrap();
        assert!((opt.mean() - got.mean()).abs() < 1e-14 && (opt.variance() - got.variance()).abs() < 1e-14);
        assert!(m.policy_dist(0.0, 1.0, &[0.0, -700.0]).unwrap().variance() > 0.0);
    }

    #[test]
    fn entropy_closed_forms_match_stats() {
        for m in all() {
            let base = m.true_phi();
            for &t in &[0.0, 0.5, 1.0] {
                for shift in [-0.7, 0.0, 0.9] {
                    let phi: Vec<f64> = base.iter().map(|v| v + shift).collect();
                    let a = m.policy_entropy(t, &phi).unwrap();
                    let b = m.policy_dist(t, 0.8, &phi).unwrap().entropy();
                    assert!((a - b).abs() < 1e-12, "{} t={t}: {a} vs {b}", m.variant.name());
                }
            }
        }
        let m = log_unc();
        let phi = [0.3, (1.0 / (TWO_PI * 0.01)).ln()];
        assert!((m.policy_entropy(0.0, &phi).unwrap() - 0.5).abs() < 1e-15);
        let q = quad();
        let phi = [0.1, 0.2, 0.3];
        assert!((q.policy_entropy(1.0, &phi).unwrap() - 0.5 * (TWO_PI.ln() + 1.2)).abs() < 1e-15);
    }

    #[test]
    fn score_matches_finite_differences() {
        for m in all() {
            let phi: Vec<f64> = m.true_phi().iter().map(|v| v + 0.1).collect();
            for &(t, x, a) in &[(0.0, 1.0, 0.3), (0.5, 0.4, 0.9), (0.8, 2.0, 0.01)] {
                let g = m.loglik_grad(a, t, x, &phi).unwrap();
                for k in 0..phi.len() {
                    let e = 1e-6;
                    let mut p = phi.clone();
                    p[k] += e;
                    let mut q = phi.clone();
                    q[k] -= e;
                    let lp = m.policy_dist(t, x, &p).unwrap().ln_pdf(a);
                    let lq = m.policy_dist(t, x, &q).unwrap().ln_pdf(a);
                    let fd = (lp - lq) / (2.0 * e);
                    assert!((fd - g[k]).abs() < 1e-6, "{} k={k}: {fd} vs {}", m.variant.name(), g[k]);
                }
            }
        }
        let m = log_unc();
        assert_eq!(m.loglik_grad(0.2, 0.0, 1.0, &[0.2, 1.0]).unwrap()[0], 0.0);
        assert!(matches!(log_con().loglik_grad(1.5, 0.0, 1.0, &[0.5, 2.0]), Err(Error::OutsideSupport { .. })));
    }

    #[test]
    fn wide_bounds_reduce_to_unconstrained_scores() {
        let wide = Model::new(
            ModelVariant::LogConstrained {
                bounds: IntervalBounds::new(0.5 - 3.5, 0.5 + 3.5).unwrap(),
            },
            MarketParams::log_experiment(),
            0.01,
            1.0,
        )
        .unwrap();
        // sd = √(e^{2.4}·0.01) ≈ 0.33, so the window spans ±10 sd
        let phi = [0.5, 2.4];
        let a = wide.loglik_grad(0.7, 0.0, 1.0, &phi).unwrap();
        let b = log_unc().loglik_grad(0.7, 0.0, 1.0, &phi).unwrap();
        for k in 0..2 {
            assert!((a[k] - b[k]).abs() < 1e-8);
        }
    }

    fn small_cfg(paths: usize) -> LearnConfig {
        LearnConfig {
            paths,
            iterations: 3,
            grid: SimGrid::new(1.0, 1.0 / 50.0).unwrap(),
            seed: 11,
            ..LearnConfig::log_defaults()
        }
    }

    #[test]
    fn streaming_matches_recorded_batches() {
        for model in all() {
            let mut cfg = small_cfg(16);
            cfg.x0 = if model.variant.units() == ActionUnits::Amount { 0.5 } else { 1.0 };
            let theta: Vec<f64> = model.true_theta().unwrap().iter().map(|v| v + 0.02).collect();
            let phi: Vec<f64> = model.true_phi().iter().map(|v| v - 0.1).collect();
            let times = cfg.grid.times();
            let kernel = Kernel::build(&model, &theta, &phi, &times).unwrap();
            let k = 2;
            let stats: Vec<PathStats> = (0..cfg.paths)
                .map(|p| {
                    let mut rng = path_rng(cfg.seed, stream_id(k, p));
                    stream_path(&model, &kernel, &theta, &phi, &times, cfg.x0, &mut rng)
                })
                .collect();
            let streamed = reduce(&stats, theta.len(), phi.len());
            let batch = iteration_batch(&model, &cfg, k, &phi).unwrap();
            let dt = model.delta_theta(&batch, &theta, &phi).unwrap();
            let dp = model.delta_phi(&batch, &theta, &phi).unwrap();
            let l2 = model.terminal_l2_grad(&batch, &theta, &phi).unwrap();
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            assert!(close(&streamed.pe_grad(PeLoss::Orthogonality), &dt), "{}", model.variant.name());
            assert!(close(&streamed.pg, &dp), "{}", model.variant.name());
            assert!(close(&streamed.pe_grad(PeLoss::TerminalL2), &l2), "{}", model.variant.name());
        }
    }

    #[test]
    fn delta_theta_is_loss_gradient() {
        for model in all() {
            let mut cfg = small_cfg(8);
            cfg.x0 = if model.variant.units() == ActionUnits::Amount { 0.5 } else { 1.0 };
            let phi = model.true_phi();
            let batch = iteration_batch(&model, &cfg, 1, &phi).unwrap();
            let theta: Vec<f64> = model.true_theta().unwrap().iter().map(|v| v + 0.05).collect();
            let g = model.delta_theta(&batch, &theta, &phi).unwrap();
            let gl2 = model.terminal_l2_grad(&batch, &theta, &phi).unwrap();
            for k in 0..theta.len() {
                let e = 1e-5;
                let mut p = theta.clone();
                p[k] += e;
                let mut q = theta.clone();
                q[k] -= e;
                let fd = (model.pe_loss(&batch, &p, &phi).unwrap() - model.pe_loss(&batch, &q, &phi).unwrap()) / (2.0 * e);
                assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1e-8), "{} k={k}: {fd} vs {}", model.variant.name(), g[k]);
                let fd = (model.terminal_l2_loss(&batch, &p, &phi).unwrap() - model.terminal_l2_loss(&batch, &q, &phi).unwrap())
                    / (2.0 * e);
                assert!((fd - gl2[k]).abs() <= 1e-6 * gl2[k].abs().max(1e-6), "{} l2 k={k}: {fd} vs {}", model.variant.name(), gl2[k]);
            }
        }
    }

    #[test]
    fn critic_update_pushes_back() {
        let model = log_unc();
        let cfg = small_cfg(64);
        let phi = model.true_phi();
        let batch = iteration_batch(&model, &cfg, 1, &phi).unwrap();
        let th = model.true_theta().unwrap()[0];
        // G is affine in θ with slope −∫τ dt < 0, so the loss gradient has the
        // sign of the offset once it dominates the noise.
        assert!(model.delta_theta(&batch, &[th + 0.5], &phi).unwrap()[0] > 0.0);
        assert!(model.delta_theta(&batch, &[th - 0.5], &phi).unwrap()[0] < 0.0);
    }

    #[test]
    fn deterministic_degenerate_path() {
        // zero volatility, zero excess return: wealth grows at r and the exact θ gives G = 0
        let mkt = MarketParams { r: 0.03, mu: 0.03, sigma: 1e-300 };
        let model = Model { variant: ModelVariant::LogUnconstrained, mkt, m: 0.01, horizon: 1.0 };
        let grid = SimGrid::new(1.0, 0.1).unwrap();
        let times = grid.times();
        let states: Vec<f64> = times.iter().map(|t| (0.03 * t).exp()).collect();
        let tr = Trajectory { times, states, actions: Some(vec![0.0; 10]) };
        let phi = [0.0, 0.0];
        let h = model.policy_entropy(0.0, &phi).unwrap();
        let theta = [0.03 + 0.01 * h - model.log_entropy_rate()];
        let g = model.delta_theta(&[tr.clone()], &theta, &phi).unwrap();
        assert!(g[0].abs() < 1e-15, "{g:?}");
        let empty = Trajectory { times: vec![0.0], states: vec![1.0], actions: Some(vec![]) };
        assert_eq!(model.delta_phi(&[empty], &theta, &phi).unwrap(), vec![0.0, 0.0]);
        let no_actions = Trajectory { actions: None, ..tr };
        assert_eq!(model.delta_phi(&[no_actions], &theta, &phi).unwrap_err(), Error::MissingActions);
        assert_eq!(model.delta_theta(&[], &theta, &phi).unwrap_err(), Error::EmptyBatch);
    }

    #[test]
    fn huge_variance_is_pushed_down() {
        let model = log_unc();
        let cfg = small_cfg(200);
        let phi = [0.5, 8.0];
        let batch = iteration_batch(&model, &cfg, 1, &phi).unwrap();
        let th = model.true_theta().unwrap();
        assert!(model.delta_phi(&batch, &th, &phi).unwrap()[1] < 0.0);
    }

    #[test]
    fn training_is_seeded() {
        let model = log_con();
        let cfg = small_cfg(32);
        let a = train(&model, &cfg).unwrap();
        let b = train(&model, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 4);
        let c = train(&model, &LearnConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn divergence_guard() {
        let model = log_unc();
        let cfg = LearnConfig {
            eta_theta: 1e12,
            ..small_cfg(8)
        };
        assert!(matches!(train(&model, &cfg), Err(Error::Divergence { iteration: 1, .. })));
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow {
            iter: 0,
            theta: vec![0.5, -0.25],
            phi: vec![1.0, 2.0],
            grad_norm_theta: 0.0,
            grad_norm_phi: 1e-7,
        }];
        let mut out = Vec::new();
        write_trace_csv(&mut out, &rows).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "iter,theta1,theta2,phi1,phi2,grad_norm_theta,grad_norm_phi\n0,0.5,-0.25,1,2,0,1e-7\n"
        );
    }

    #[test]
    fn residuals_vanish_for_exact_value() {
        let mkt = MarketParams { r: 0.03, mu: 0.03, sigma: 1e-300 };
        let grid = SimGrid::new(1.0, 0.01).unwrap();
        let pol = crate::market::ConstantPolicy::fraction(crate::stats::GaussianPolicy::new(0.0, 1.0).unwrap());
        let h = pol.dist.entropy();
        let rate = 0.03 + 0.01 * h;
        let res = martingale_residuals(|t, x: f64| x.ln() + rate * (1.0 - t), &pol, &mkt, &grid, 0.01, 1.0, 4, 0, 5).unwrap();
        for b in res {
            assert!(b.mean.abs() < 1e-14 && b.stderr < 1e-14, "{b:?}");
        }
    }
}
