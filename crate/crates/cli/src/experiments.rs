use explorer_core::closedform_log::{
    constrained_merton, constrained_value_no_exploration, exploration_cost_constrained, exploration_cost_unconstrained,
    log_policy_constrained, log_policy_unconstrained, log_value_constrained, log_value_unconstrained, IntervalBounds,
};
use explorer_core::closedform_quad::{quad_mean_terminal_wealth, quad_value_unconstrained};
use explorer_core::factor::{factor_value, FactorModel, McSettings};
use explorer_core::learner::{train_with, write_trace_csv, LearnedPolicy, Model, ModelVariant, TrainOutput};
use explorer_core::market::{rollout_batch, write_trajectories_csv, ConstantPolicy, Stepping};
use explorer_core::stats::{kl_trunc, GaussianPolicy, TruncatedGaussianPolicy};
use explorer_core::{Error, MarketParams};
use serde_json::{json, Map, Value};

use crate::config::{to_interval, Experiment, ExperimentConfig};
use crate::output::{tag, Cell, OutputDir};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("{0}")]
    Model(Error),
    #[error("{context}: {source}")]
    Diverged { context: String, source: Error },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Model(e)
    }
}

type Res<T> = Result<T, RunError>;

/// Runs one experiment into `out`; returns the manifest summary.
pub fn run(cfg: &ExperimentConfig, out: &mut OutputDir) -> Res<Value> {
    match cfg.experiment {
        Experiment::CostCurve => cost_curve(cfg, out),
        Experiment::ValueGap => value_gap(cfg, out),
        Experiment::WealthDensity => wealth_density(cfg, out),
        Experiment::PolicyDiracLimit => dirac_limit(cfg, out),
        Experiment::TrainLogConstrained | Experiment::TrainQuadratic => train_experiment(cfg, out),
        Experiment::FactorDemo => factor_demo(cfg, out),
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
}

fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    linspace(lo.ln(), hi.ln(), n).into_iter().map(f64::exp).collect()
}

fn cost_curve(cfg: &ExperimentConfig, out: &mut OutputDir) -> Res<Value> {
    let c = &cfg.cost_curve;
    let mkt = cfg.market()?;
    let horizon = cfg.horizon();
    let ms = logspace(c.m_min, c.m_max, c.points);
    let mut curves: Vec<(&str, IntervalBounds)> = vec![("unconstrained", IntervalBounds::unbounded())];
    for b in &c.bounds {
        curves.push(("bounds", to_interval(b)?));
    }
    for &a in &c.lower_sweep {
        curves.push(("lower-sweep", to_interval(&[a, c.sweep_upper])?));
    }
    for &b in &c.upper_sweep {
        curves.push(("upper-sweep", to_interval(&[c.sweep_lower, b])?));
    }
    let mut rows = Vec::new();
    let mut at_max = Vec::new();
    for (family, b) in &curves {
        let mut last = 0.0;
        for &m in &ms {
            let cost = if b.is_unbounded() {
                exploration_cost_unconstrained(m, horizon)
            } else {
                exploration_cost_constrained(m, horizon, &mkt, b)?
            };
            rows.push(vec![Cell::from(*family), b.a.into(), b.b.into(), m.into(), cost.into()]);
            last = cost;
        }
        at_max.push(json!({ "family": family, "a": num(b.a), "b": num(b.b), "cost_at_m_max": last }));
    }
    out.write_table("cost_vs_m.csv", &["family", "a", "b", "m", "cost"], &rows)?;
    // the unconstrained curve is the closed form mT/2 itself
    let worst = ms.iter().map(|&m| (exploration_cost_unconstrained(m, horizon) - 0.5 * m * horizon).abs()).fold(0.0, f64::max);
    Ok(json!({
        "m_max": c.m_max,
        "horizon": horizon,
        "unconstrained_max_abs_diff_from_mT_over_2": worst,
        "curves": at_max,
    }))
}

/// JSON has no infinities; write them as strings.
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(if v > 0.0 { "inf" } else { "-inf" })
    }
}

fn value_gap(cfg: &ExperimentConfig, out: &mut OutputDir) -> Res<Value> {
    let v = &cfg.value_gap;
    let mkt = cfg.market()?;
    let horizon = cfg.horizon();
    let b = to_interval(&v.bounds)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut gaps: Vec<Vec<f64>> = Vec::new();
    for &m in &v.m {
        let mut worst = 0.0f64;
        let mut these = Vec::new();
        for t in linspace(0.0, horizon, v.t_points) {
            for x in linspace(v.x_min, v.x_max, v.x_points) {
                let explore = log_value_constrained(t, x, m, &mkt, horizon, &b)?;
                let classic = constrained_value_no_exploration(t, x, &mkt, horizon, &b)?;
                let gap = explore - classic;
                worst = worst.max(gap.abs());
                these.push(gap.abs());
                rows.push(vec![m.into(), t.into(), x.into(), explore.into(), classic.into(), gap.into()]);
            }
        }
        summary.push(json!({ "m": m, "max_abs_gap": worst }));
        gaps.push(these);
    }
    out.write_table("value_gap.csv", &["m", "t", "x", "value_exploratory", "value_classical", "gap"], &rows)?;
    // for each pair of weights, is the smaller weight's |gap| below the larger one's at every grid point?
    let mut ordering = Vec::new();
    for i in 0..v.m.len() {
        for j in 0..v.m.len() {
            if v.m[i] < v.m[j] {
                let below = gaps[i].iter().zip(&gaps[j]).filter(|(g, _)| **g > 0.0).all(|(g, h)| g < h);
                ordering.push(json!({ "m_small": v.m[i], "m_large": v.m[j], "gap_uniformly_smaller": below }));
            }
        }
    }
    Ok(json!({ "bounds": [num(b.a), num(b.b)], "by_m": summary, "ordering": ordering }))
}

fn optimal_log_dist(mkt: &MarketParams, m: f64, bounds: Option<&IntervalBounds>) -> Res<TruncatedGaussianPolicy> {
    Ok(match bounds {
        Some(b) => log_policy_constrained(mkt, m, b)?,
        None => log_policy_unconstrained(mkt, m)?.into(),
    })
}

fn wealth_density(cfg: &ExperimentConfig, out: &mut OutputDir) -> Res<Value> {
    let w = &cfg.wealth_density;
    let mkt = cfg.market()?;
    let grid = cfg.grid()?;
    let bounds = w.bounds.as_ref().map(to_interval).transpose()?;
    // step index nearest to each requested time
    let idx: Vec<usize> = w.times.iter().map(|&t| ((t / grid.horizon) * grid.n_steps as f64).round() as usize).collect();
    let mut cases = vec![(0.0, {
        let pi = bounds.as_ref().map_or(mkt.merton_fraction(), |b| constrained_merton(&mkt, b));
        GaussianPolicy::new(pi, 1e-300)?.into()
    })];
    for &m in &w.m {
        cases.push((m, optimal_log_dist(&mkt, m, bounds.as_ref())?));
    }
    let mut samples = Vec::new();
    let mut stats = Vec::new();
    let mut summary = Vec::new();
    let mut by_time = std::collections::BTreeMap::new();
    for &seed in &cfg.seeds {
        for (m, dist) in &cases {
            let policy = ConstantPolicy::fraction(*dist);
            let paths = rollout_batch(&policy, &mkt, &grid, w.x0, seed, w.paths, Stepping::ExploratoryMoments)?;
            if w.export_paths > 0 {
                let keep = &paths[..w.export_paths.min(paths.len())];
                out.write_with(&format!("paths_m{}_seed{seed}.csv", tag(*m)), |f| write_trajectories_csv(f, keep))?;
            }
            for (&t, &i) in w.times.iter().zip(&idx) {
                let logs: Vec<f64> = paths.iter().map(|p| p.states[i].ln()).collect();
                for (p, &lx) in logs.iter().enumerate() {
                    samples.push(vec![seed.into(), (*m).into(), p.into(), t.into(), lx.into()]);
                }
                let n = logs.len() as f64;
                let mean = logs.iter().sum::<f64>() / n;
                let var = logs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
                let e_a2 = dist.second_moment();
                // ln X_t is Gaussian under the moment-averaged dynamics with a constant law
                let s2 = mkt.sigma * mkt.sigma * e_a2;
                let true_mean = w.x0.ln() + (mkt.r + (mkt.mu - mkt.r) * dist.mean() - 0.5 * s2) * t;
                let true_var = s2 * t;
                stats.push(vec![
                    seed.into(),
                    (*m).into(),
                    t.into(),
                    mean.into(),
                    true_mean.into(),
                    var.into(),
                    true_var.into(),
                    e_a2.into(),
                ]);
                summary.push(json!({
                    "seed": seed,
                    "m": m,
                    "t": t,
                    "mean_log_wealth": mean,
                    "mean_log_wealth_true": true_mean,
                    "var_log_wealth": var,
                    "var_log_wealth_true": true_var,
                    "second_moment_action": e_a2,
                }));
                by_time.entry(format!("{}-{}", seed, tag(t))).or_insert_with(Vec::new).push((*m, var));
            }
        }
    }
    out.write_table("wealth_samples.csv", &["seed", "m", "path", "t", "log_wealth"], &samples)?;
    out.write_table(
        "wealth_stats.csv",
        &["seed", "m", "t", "mean_log_wealth", "mean_log_wealth_true", "var_log_wealth", "var_log_wealth_true", "second_moment_action"],
        &stats,
    )?;
    let monotone: Vec<Value> = by_time
        .into_iter()
        .map(|(key, mut vars)| {
            vars.sort_by(|a, b| a.0.total_cmp(&b.0));
            json!({ "seed_time": key, "variance_increasing_in_m": vars.windows(2).all(|w| w[1].1 > w[0].1) })
        })
        .collect();
    Ok(json!({ "bounds": bounds.map(|b| vec![num(b.a), num(b.b)]), "stats": summary, "monotonicity": monotone }))
}

fn dirac_limit(cfg: &ExperimentConfig, out: &mut OutputDir) -> Res<Value> {
    let d = &cfg.dirac;
    let mkt = cfg.market()?;
    let b = to_interval(&d.bounds)?;
    let target = constrained_merton(&mkt, &b);
    let mut summary = Vec::new();
    for &m in &d.m {
        let dist = log_policy_constrained(&mkt, m, &b)?;
        let rows: Vec<Vec<Cell>> = linspace(b.a, b.b, d.points).into_iter().map(|pi| vec![pi.into(), dist.pdf(pi).into()]).collect();
        out.write_table(&format!("dirac_m{}.csv", tag(m)), &["pi", "density"], &rows)?;
        let near = dist.cdf(target + 0.01) - dist.cdf(target - 0.01);
        summary.push(json!({
            "m": m,
            "mean": dist.mean(),
            "sd": dist.variance().sqrt(),
            "mass_within_0.01": near,
        }));
    }
    Ok(json!({ "constrained_merton": target, "by_m": summary }))
}

fn training_model(cfg: &ExperimentConfig, m: f64) -> Res<Model> {
    let variant = match cfg.experiment {
        Experiment::TrainQuadratic => ModelVariant::Quadratic { quad: cfg.quad()? },
        _ => ModelVariant::LogConstrained { bounds: cfg.learn_bounds()? },
    };
    Ok(Model::new(variant, cfg.market()?, m, cfg.horizon())?)
}

fn mean_of(runs: &[TrainOutput], f: impl Fn(&TrainOutput) -> &[f64]) -> Vec<f64> {
    let dim = f(&runs[0]).len();
    (0..dim).map(|k| runs.iter().map(|r| f(r)[k]).sum::<f64>() / runs.len() as f64).collect()
}

/// Grid covering the bulk of `dist`, clipped to its support.
fn density_grid(dists: &[TruncatedGaussianPolicy], n: usize) -> Vec<f64> {
    let lo = dists.iter().map(|d| d.lower().max(d.mean() - 6.0 * d.variance().sqrt())).fold(f64::INFINITY, f64::min);
    let hi = dists.iter().map(|d| d.upper().min(d.mean() + 6.0 * d.variance().sqrt())).fold(f64::NEG_INFINITY, f64::max);
    linspace(lo, hi, n)
}

fn train_experiment(cfg: &ExperimentConfig, out: &mut OutputDir) -> Res<Value> {
    let l = &cfg.learn;
    let [t_eval, x_eval] = l.eval_point.unwrap_or([0.5, 0.5]);
    let trailing = l.trailing.unwrap_or(100);
    let mut param_rows = Vec::new();
    let mut by_m = Vec::new();
    for m in cfg.learn_m() {
        let model = training_model(cfg, m)?;
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let lc = cfg.learn_config(seed)?;
            let checkpoints = l.checkpoints.clone().unwrap_or_else(|| (1..=4).map(|q| q * lc.iterations / 4).filter(|&k| k > 0).collect());
            log::info!("training m = {m}, seed {seed}: {} iterations of {} paths", lc.iterations, lc.paths);
            let run = train_with(&model, &lc, |row| {
                if row.iter % 100 == 0 {
                    log::debug!("iter {}: theta {:?} phi {:?}", row.iter, row.theta, row.phi);
                }
            })
            .map_err(|e| match e {
                Error::Divergence { .. } => RunError::Diverged {
                    context: format!("m = {m}, seed {seed}"),
                    source: e,
                },
                other => other.into(),
            })?;
            out.write_with(&format!("trace_m{}_seed{seed}.csv", tag(m)), |w| write_trace_csv(w, &run.trace))?;
            for &k in &checkpoints {
                let row = &run.trace[k];
                let mut cells = vec![Cell::from(m), seed.into(), k.into()];
                cells.extend(row.theta.iter().chain(&row.phi).map(|&v| Cell::from(v)));
                param_rows.push(cells);
            }
            runs.push(run);
        }
        let theta = mean_of(&runs, |r| &r.theta);
        let phi = mean_of(&runs, |r| &r.phi);
        let tails: Vec<Vec<f64>> = runs.iter().map(|r| r.trailing_mean(trailing, true)).collect();
        let theta_trailing: Vec<f64> = (0..theta.len()).map(|k| tails.iter().map(|t| t[k]).sum::<f64>() / tails.len() as f64).collect();
        let true_theta = model.true_theta()?;
        let true_phi = model.true_phi();
        let learned = model.policy_dist(t_eval, x_eval, &phi)?;
        let optimal = model.policy_dist(t_eval, x_eval, &true_phi)?;
        let kl = kl_trunc(&learned, &optimal).ok();
        let true_value = match &model.variant {
            ModelVariant::Quadratic { quad } => quad_value_unconstrained(t_eval, x_eval, m, &model.mkt, quad, model.horizon)?,
            ModelVariant::LogConstrained { bounds } => log_value_constrained(t_eval, x_eval, m, &model.mkt, model.horizon, bounds)?,
            ModelVariant::LogUnconstrained => log_value_unconstrained(t_eval, x_eval, m, &model.mkt, model.horizon)?,
        };
        let learned_value = model.j_theta(t_eval, x_eval, &theta)?;
        let grid = density_grid(&[learned, optimal], l.density_points.unwrap_or(401));
        let dens: Vec<Vec<Cell>> = grid.iter().map(|&a| vec![a.into(), optimal.pdf(a).into(), learned.pdf(a).into()]).collect();
        out.write_table(&format!("density_m{}.csv", tag(m)), &["pi", "true_density", "learned_density"], &dens)?;
        let mut entry = Map::new();
        entry.insert("m".into(), json!(m));
        entry.insert("theta_true".into(), json!(true_theta));
        entry.insert("theta_learned".into(), json!(theta));
        entry.insert("theta_trailing_mean".into(), json!(theta_trailing));
        entry.insert("phi_true".into(), json!(true_phi));
        entry.insert("phi_learned".into(), json!(phi));
        entry.insert("phi_init_mean".into(), json!(mean_of(&runs, |r| &r.phi_init)));
        entry.insert("eval_point".into(), json!([t_eval, x_eval]));
        entry.insert("value_true".into(), json!(true_value));
        entry.insert("value_learned".into(), json!(learned_value));
        entry.insert("kl_learned_to_true".into(), json!(kl));
        if let ModelVariant::Quadratic { quad } = &model.variant {
            let lc = cfg.learn_config(cfg.seeds[0])?;
            let policy = LearnedPolicy { model, phi: phi.clone() };
            let paths = rollout_batch(&policy, &model.mkt, &lc.grid, lc.x0, lc.seed ^ 0x5eed, 10_000, Stepping::ExploratoryMoments)?;
            let mean_xt = paths.iter().map(|p| p.terminal()).sum::<f64>() / paths.len() as f64;
            entry.insert("mean_terminal_wealth_learned".into(), json!(mean_xt));
            entry.insert("mean_terminal_wealth_true".into(), json!(quad_mean_terminal_wealth(lc.x0, &model.mkt, quad, model.horizon)));
        }
        by_m.push(Value::Object(entry));
    }
    let model = training_model(cfg, cfg.learn_m()[0])?;
    let mut header = vec!["m".to_string(), "seed".into(), "iter".into()];
    header.extend((1..=model.variant.theta_dim()).map(|k| format!("theta{k}")));
    header.extend((1..=model.variant.phi_dim()).map(|k| format!("phi{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.write_table("checkpoints.csv", &header, &param_rows)?;
    Ok(json!({ "variant": model.variant.name(), "by_m": by_m }))
}

fn factor_demo(cfg: &ExperimentConfig, out: &mut OutputDir) -> Res<Value> {
    let f = &cfg.factor;
    let mkt = cfg.market()?;
    let horizon = cfg.horizon();
    let constant = FactorModel::constant(mkt.r, mkt.mu, mkt.sigma)?;
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for &[t, x, m] in &f.cases {
        let mc = McSettings { n_paths: f.paths[0], n_steps: f.n_steps, seed: cfg.seeds[0] };
        let (v, se) = factor_value(t, x, 0.0, m, &constant, horizon, &mc)?;
        let exact = log_value_unconstrained(t, x, m, &mkt, horizon)?;
        worst = worst.max((v - exact).abs());
        rows.push(vec![t.into(), x.into(), m.into(), exact.into(), v.into(), se.into()]);
    }
    out.write_table("factor_constant.csv", &["t", "x", "m", "closed_form", "factor_value", "stderr"], &rows)?;

    let (mu, sigma, mu_slope, sigma_slope) = (mkt.mu, mkt.sigma, f.mu_slope, f.sigma_slope);
    let ou = FactorModel::ornstein_uhlenbeck(
        mkt.r,
        move |y| mu + mu_slope * y,
        move |y| sigma * (1.0 + sigma_slope * y.tanh()),
        f.kappa,
        f.mean,
        f.vol,
    )?;
    let mut ou_rows = Vec::new();
    let mut ses = Vec::new();
    for &seed in &cfg.seeds {
        for &n in &f.paths {
            let mc = McSettings { n_paths: n, n_steps: f.n_steps, seed };
            let (v, se) = factor_value(0.0, 1.0, f.y0, f.m, &ou, horizon, &mc)?;
            ou_rows.push(vec![seed.into(), n.into(), v.into(), se.into()]);
            ses.push(json!({ "seed": seed, "paths": n, "value": v, "stderr": se }));
        }
    }
    out.write_table("factor_ou.csv", &["seed", "paths", "value", "stderr"], &ou_rows)?;
    Ok(json!({ "constant_max_abs_diff": worst, "ou": ses }))
}
