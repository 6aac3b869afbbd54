//! Experiment configuration: one TOML file per run. Every section has
//! defaults, so a file holding only `experiment = "..."` is valid.

use std::path::{Path, PathBuf};

use explorer_core::closedform_log::IntervalBounds;
use explorer_core::closedform_quad::QuadUtilityParams;
use explorer_core::learner::{LearnConfig, ParamInit, PeLoss};
use explorer_core::market::SimGrid;
use explorer_core::MarketParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    CostCurve,
    ValueGap,
    WealthDensity,
    TrainLogConstrained,
    PolicyDiracLimit,
    TrainQuadratic,
    FactorDemo,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Self::CostCurve,
        Self::ValueGap,
        Self::WealthDensity,
        Self::TrainLogConstrained,
        Self::PolicyDiracLimit,
        Self::TrainQuadratic,
        Self::FactorDemo,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Self::CostCurve => "cost-curve",
            Self::ValueGap => "value-gap",
            Self::WealthDensity => "wealth-density",
            Self::TrainLogConstrained => "train-log-constrained",
            Self::PolicyDiracLimit => "policy-dirac-limit",
            Self::TrainQuadratic => "train-quadratic",
            Self::FactorDemo => "factor-demo",
        }
    }

    pub fn describe(&self) -> &'static str {
        match self {
            Self::CostCurve => "exploration cost against m, unconstrained and for several portfolio bounds",
            Self::ValueGap => "gap between exploratory and classical constrained values on a (t, x) grid",
            Self::WealthDensity => "samples of log-wealth under the optimal policy for several m and m = 0",
            Self::TrainLogConstrained => "actor-critic training for log utility with bounds, averaged over seeds",
            Self::PolicyDiracLimit => "optimal constrained densities as m goes to zero",
            Self::TrainQuadratic => "actor-critic training for quadratic utility",
            Self::FactorDemo => "factor-model value against the constant-coefficient closed form",
        }
    }

    fn default_market(&self) -> MarketParams {
        match self {
            Self::TrainQuadratic => MarketParams::quadratic_experiment(),
            _ => MarketParams::log_experiment(),
        }
    }
}

/// Portfolio bounds as `[a, b]`; `inf`/`-inf` are valid TOML floats.
pub type Bounds = [f64; 2];

pub fn to_interval(b: &Bounds) -> Result<IntervalBounds, ConfigError> {
    IntervalBounds::new(b[0], b[1]).map_err(|e| bad(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
    #[serde(default = "one")]
    pub horizon: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostCurveSection {
    pub m_min: f64,
    pub m_max: f64,
    pub points: usize,
    pub bounds: Vec<Bounds>,
    /// Lower bounds swept with the upper bound held at `sweep_upper`.
    pub lower_sweep: Vec<f64>,
    pub sweep_upper: f64,
    /// Upper bounds swept with the lower bound held at `sweep_lower`.
    pub upper_sweep: Vec<f64>,
    pub sweep_lower: f64,
}

impl Default for CostCurveSection {
    fn default() -> Self {
        Self {
            m_min: 0.001,
            m_max: 2.0,
            points: 60,
            bounds: vec![[0.0, 1.0]],
            lower_sweep: vec![-1.0, -0.5, 0.0],
            sweep_upper: 1.0,
            upper_sweep: vec![1.0, 1.5, 2.0],
            sweep_lower: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueGapSection {
    pub m: Vec<f64>,
    pub bounds: Bounds,
    pub t_points: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub x_points: usize,
}

impl Default for ValueGapSection {
    fn default() -> Self {
        Self {
            m: vec![2.0, 0.001],
            bounds: [0.0, 1.0],
            t_points: 11,
            x_min: 0.5,
            x_max: 2.0,
            x_points: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WealthDensitySection {
    pub m: Vec<f64>,
    /// `None` simulates the unconstrained optimum.
    pub bounds: Option<Bounds>,
    pub paths: usize,
    pub times: Vec<f64>,
    pub x0: f64,
    /// Full paths written per weight and seed, as `path,t,x`.
    pub export_paths: usize,
}

impl Default for WealthDensitySection {
    fn default() -> Self {
        Self {
            m: vec![0.5, 0.1, 0.001],
            bounds: Some([0.0, 1.0]),
            paths: 10_000,
            times: vec![0.5, 1.0],
            x0: 1.0,
            export_paths: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiracSection {
    pub m: Vec<f64>,
    pub bounds: Bounds,
    pub points: usize,
}

impl Default for DiracSection {
    fn default() -> Self {
        Self {
            m: vec![1e-4, 1e-5],
            bounds: [0.0, 1.0],
            points: 2001,
        }
    }
}

/// Training options. Unset fields take the defaults of the chosen experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnSection {
    pub m: Option<Vec<f64>>,
    pub bounds: Option<Bounds>,
    pub eta_theta: Option<f64>,
    pub eta_phi: Option<f64>,
    pub iterations: Option<usize>,
    pub paths: Option<usize>,
    pub decay: Option<f64>,
    pub x0: Option<f64>,
    pub theta_init: Option<ParamInit>,
    pub phi_init: Option<ParamInit>,
    pub pe_loss: Option<PeLoss>,
    pub divergence_bound: Option<f64>,
    /// Iterations reported in the parameter table.
    pub checkpoints: Option<Vec<usize>>,
    /// Point `(t, x)` for the value error and the density comparison.
    pub eval_point: Option<[f64; 2]>,
    pub density_points: Option<usize>,
    /// Window for the trailing parameter means.
    pub trailing: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorSection {
    pub cases: Vec<[f64; 3]>,
    pub y0: f64,
    pub kappa: f64,
    pub mean: f64,
    pub vol: f64,
    /// `μ(y) = mu + mu_slope·y`
    pub mu_slope: f64,
    /// `σ(y) = sigma·(1 + sigma_slope·tanh y)`
    pub sigma_slope: f64,
    pub paths: Vec<usize>,
    pub n_steps: usize,
    pub m: f64,
}

impl Default for FactorSection {
    fn default() -> Self {
        Self {
            cases: vec![[0.0, 1.0, 0.01], [0.5, 0.5, 0.01], [0.0, 1.0, 0.1], [0.25, 2.0, 1.0]],
            y0: 0.2,
            kappa: 1.5,
            mean: 0.0,
            vol: 0.6,
            mu_slope: 0.05,
            sigma_slope: 0.2,
            paths: vec![1000, 4000, 16000],
            n_steps: 250,
            m: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub market: Option<MarketSection>,
    #[serde(default)]
    pub quadratic: Option<QuadUtilityParams>,
    #[serde(default)]
    pub cost_curve: CostCurveSection,
    #[serde(default)]
    pub value_gap: ValueGapSection,
    #[serde(default)]
    pub wealth_density: WealthDensitySection,
    #[serde(default)]
    pub dirac: DiracSection,
    #[serde(default)]
    pub learn: LearnSection,
    #[serde(default)]
    pub factor: FactorSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_dt() -> f64 {
    1.0 / 250.0
}

/// Built-in configurations, addressable by name instead of a path.
pub const PRESETS: &[(&str, &str)] = &[
    ("log_constrained_sec53", include_str!("../presets/log_constrained_sec53.toml")),
    ("quadratic_sec63", include_str!("../presets/quadratic_sec63.toml")),
    ("cost_curve", include_str!("../presets/cost_curve.toml")),
    ("value_gap", include_str!("../presets/value_gap.toml")),
    ("wealth_density", include_str!("../presets/wealth_density.toml")),
    ("policy_dirac_limit", include_str!("../presets/policy_dirac_limit.toml")),
    ("factor_demo", include_str!("../presets/factor_demo.toml")),
];

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            source: Box::new(e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `arg` as a file, or as a preset name when no such file exists.
    pub fn load(arg: &str) -> Result<Self, ConfigError> {
        let path = Path::new(arg);
        if !path.is_file() {
            if let Some((_, text)) = PRESETS.iter().find(|(name, _)| *name == arg) {
                return Self::parse(text, path);
            }
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn market(&self) -> Result<MarketParams, ConfigError> {
        let mkt = match &self.market {
            Some(s) => MarketParams { r: s.r, mu: s.mu, sigma: s.sigma },
            None => self.experiment.default_market(),
        };
        mkt.validate().map_err(|e| bad(e.to_string()))?;
        Ok(mkt)
    }

    pub fn horizon(&self) -> f64 {
        self.market.as_ref().map_or(1.0, |s| s.horizon)
    }

    pub fn grid(&self) -> Result<SimGrid, ConfigError> {
        SimGrid::new(self.horizon(), self.dt).map_err(|e| bad(e.to_string()))
    }

    pub fn quad(&self) -> Result<QuadUtilityParams, ConfigError> {
        let q = self.quadratic.unwrap_or_default();
        q.validate().map_err(|e| bad(e.to_string()))?;
        Ok(q)
    }

    /// Exploration weights of a training experiment.
    pub fn learn_m(&self) -> Vec<f64> {
        self.learn.m.clone().unwrap_or_else(|| vec![0.01])
    }

    pub fn learn_bounds(&self) -> Result<IntervalBounds, ConfigError> {
        to_interval(&self.learn.bounds.unwrap_or([0.0, 1.0]))
    }

    /// Training configuration for one seed.
    pub fn learn_config(&self, seed: u64) -> Result<LearnConfig, ConfigError> {
        let base = match self.experiment {
            Experiment::TrainQuadratic => LearnConfig::quadratic_defaults(),
            _ => LearnConfig::log_defaults(),
        };
        let l = &self.learn;
        let cfg = LearnConfig {
            eta_theta: l.eta_theta.unwrap_or(base.eta_theta),
            eta_phi: l.eta_phi.unwrap_or(base.eta_phi),
            iterations: l.iterations.unwrap_or(base.iterations),
            paths: l.paths.unwrap_or(base.paths),
            grid: self.grid()?,
            x0: l.x0.unwrap_or(base.x0),
            decay: l.decay.unwrap_or(base.decay),
            seed,
            theta_init: l.theta_init.clone().unwrap_or(base.theta_init),
            phi_init: l.phi_init.clone().unwrap_or(base.phi_init),
            pe_loss: l.pe_loss.unwrap_or(base.pe_loss),
            divergence_bound: l.divergence_bound.unwrap_or(base.divergence_bound),
        };
        cfg.validate().map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }

    /// Config as recorded in the manifest: the resolved market plus only the
    /// section the experiment reads.
    pub fn echo(&self) -> serde_json::Value {
        let full = serde_json::to_value(self).unwrap_or_default();
        let section = match self.experiment {
            Experiment::CostCurve => "cost_curve",
            Experiment::ValueGap => "value_gap",
            Experiment::WealthDensity => "wealth_density",
            Experiment::PolicyDiracLimit => "dirac",
            Experiment::TrainLogConstrained | Experiment::TrainQuadratic => "learn",
            Experiment::FactorDemo => "factor",
        };
        let mut echo = serde_json::Map::new();
        for key in ["experiment", "seeds", "dt", section] {
            echo.insert(key.into(), full[key].clone());
        }
        if let Ok(mkt) = self.market() {
            echo.insert(
                "market".into(),
                serde_json::json!({ "r": mkt.r, "mu": mkt.mu, "sigma": mkt.sigma, "horizon": self.horizon() }),
            );
        }
        if self.experiment == Experiment::TrainQuadratic {
            echo.insert("quadratic".into(), serde_json::to_value(self.quad().unwrap_or_default()).unwrap_or_default());
        }
        serde_json::Value::Object(echo)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(bad("seeds must not be empty"));
        }
        self.market()?;
        self.grid()?;
        let positive = |name: &str, ms: &[f64]| {
            if ms.is_empty() || ms.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
                Err(bad(format!("{name} must be a non-empty list of positive numbers")))
            } else {
                Ok(())
            }
        };
        match self.experiment {
            Experiment::CostCurve => {
                let c = &self.cost_curve;
                if !(c.m_min > 0.0 && c.m_max > c.m_min && c.points >= 2) {
                    return Err(bad("cost_curve needs 0 < m_min < m_max and at least two points"));
                }
                for b in &c.bounds {
                    to_interval(b)?;
                }
                for &a in &c.lower_sweep {
                    to_interval(&[a, c.sweep_upper])?;
                }
                for &b in &c.upper_sweep {
                    to_interval(&[c.sweep_lower, b])?;
                }
            }
            Experiment::ValueGap => {
                let v = &self.value_gap;
                positive("value_gap.m", &v.m)?;
                to_interval(&v.bounds)?;
                if !(v.x_min > 0.0 && v.x_max > v.x_min && v.x_points >= 2 && v.t_points >= 2) {
                    return Err(bad("value_gap grid needs 0 < x_min < x_max and at least two points per axis"));
                }
            }
            Experiment::WealthDensity => {
                let w = &self.wealth_density;
                positive("wealth_density.m", &w.m)?;
                if let Some(b) = &w.bounds {
                    to_interval(b)?;
                }
                if w.paths < 2 || !(w.x0 > 0.0) {
                    return Err(bad("wealth_density needs at least two paths and x0 > 0"));
                }
                let grid = self.grid()?;
                for &t in &w.times {
                    if !(t > 0.0 && t <= grid.horizon + 1e-12) {
                        return Err(bad(format!("wealth_density time {t} outside (0, horizon]")));
                    }
                }
            }
            Experiment::PolicyDiracLimit => {
                let d = &self.dirac;
                positive("dirac.m", &d.m)?;
                let b = to_interval(&d.bounds)?;
                if !(b.a.is_finite() && b.b.is_finite()) || d.points < 2 {
                    return Err(bad("dirac needs finite bounds and at least two points"));
                }
            }
            Experiment::TrainLogConstrained | Experiment::TrainQuadratic => {
                positive("learn.m", &self.learn_m())?;
                if self.experiment == Experiment::TrainLogConstrained {
                    self.learn_bounds()?;
                } else {
                    self.quad()?;
                }
                let cfg = self.learn_config(self.seeds[0])?;
                if let Some(cp) = &self.learn.checkpoints {
                    if cp.iter().any(|&k| k == 0 || k > cfg.iterations) {
                        return Err(bad(format!("checkpoints must lie in 1..={}", cfg.iterations)));
                    }
                }
                if let Some([t, _]) = self.learn.eval_point {
                    if !(0.0..=self.horizon()).contains(&t) {
                        return Err(bad("eval_point time outside [0, horizon]"));
                    }
                }
            }
            Experiment::FactorDemo => {
                let f = &self.factor;
                if f.paths.is_empty() || f.paths.iter().any(|&n| n < 2) || f.n_steps == 0 {
                    return Err(bad("factor needs path counts >= 2 and at least one step"));
                }
                if !(f.m > 0.0) || f.cases.iter().any(|c| !(c[1] > 0.0 && c[2] > 0.0 && c[0] < self.horizon())) {
                    return Err(bad("factor cases are [t, x, m] with t < horizon, x > 0, m > 0"));
                }
            }
        }
        Ok(())
    }
}
