mod common;

use explorer_core::closedform_log::IntervalBounds;
use explorer_core::closedform_quad::QuadUtilityParams;
use explorer_core::learner::*;
use explorer_core::market::SimGrid;
use explorer_core::MarketParams;

use common::{central_diff, mean_se};

fn log_model(variant: ModelVariant) -> Model {
    Model::new(variant, MarketParams::log_experiment(), 0.01, 1.0).unwrap()
}

/// Value of a constant log-utility policy at `(0, 1)`: the horizon times the
/// entropy-regularised reward rate, computed from the policy's moments.
fn constant_policy_value(model: &Model, phi: &[f64]) -> f64 {
    let mkt = model.mkt;
    let d = model.policy_dist(0.0, 1.0, phi).unwrap();
    let rate = mkt.r + (mkt.mu - mkt.r) * d.mean() - 0.5 * mkt.sigma * mkt.sigma * d.second_moment() + model.m * d.entropy();
    rate * model.horizon
}

#[test]
fn policy_gradient_matches_finite_differences() {
    let variants = [
        ModelVariant::LogUnconstrained,
        ModelVariant::LogConstrained {
            bounds: IntervalBounds::long_only_unlevered(),
        },
    ];
    for variant in variants {
        let model = log_model(variant);
        let phi = vec![0.5, 2.77];
        let theta = model.true_theta().unwrap();
        let cfg = LearnConfig {
            paths: 100_000,
            grid: SimGrid::new(1.0, 1.0 / 50.0).unwrap(),
            seed: 3,
            ..LearnConfig::log_defaults()
        };
        let batch = iteration_batch(&model, &cfg, 1, &phi).unwrap();
        let per_path: Vec<Vec<f64>> = batch.chunks(1).map(|p| model.delta_phi(p, &theta, &phi).unwrap()).collect();
        for k in 0..2 {
            let fd = central_diff(
                |v| {
                    let mut p = phi.clone();
                    p[k] = v;
                    constant_policy_value(&model, &p)
                },
                phi[k],
                1e-5,
            );
            let (pg, se) = mean_se(&per_path.iter().map(|g| g[k]).collect::<Vec<_>>());
            assert!((pg - fd).abs() < 4.0 * se, "{} phi{}: pg {pg} ± {se} vs fd {fd}", variant.name(), k + 1);
        }
    }
}

#[test]
fn batch_estimates_are_means_of_path_estimates() {
    let model = log_model(ModelVariant::LogUnconstrained);
    let cfg = LearnConfig {
        paths: 20,
        grid: SimGrid::new(1.0, 0.05).unwrap(),
        ..LearnConfig::log_defaults()
    };
    let phi = model.true_phi();
    let theta = model.true_theta().unwrap();
    let batch = iteration_batch(&model, &cfg, 2, &phi).unwrap();
    let whole = model.delta_phi(&batch, &theta, &phi).unwrap();
    for k in 0..2 {
        let mean = batch.chunks(1).map(|p| model.delta_phi(p, &theta, &phi).unwrap()[k]).sum::<f64>() / 20.0;
        assert!((whole[k] - mean).abs() < 1e-12);
    }
}

#[test]
fn test_function_is_the_theta_gradient_of_j() {
    let models = [
        log_model(ModelVariant::LogConstrained {
            bounds: IntervalBounds::long_only_unlevered(),
        }),
        Model::new(
            ModelVariant::Quadratic {
                quad: QuadUtilityParams::default(),
            },
            MarketParams::quadratic_experiment(),
            0.01,
            1.0,
        )
        .unwrap(),
    ];
    for model in models {
        let theta: Vec<f64> = model.true_theta().unwrap().iter().map(|v| v + 0.013).collect();
        let (t, x) = (0.3, 0.8);
        let h = model.test_function(t, x, &theta).unwrap();
        for k in 0..theta.len() {
            let fd = central_diff(
                |v| {
                    let mut th = theta.clone();
                    th[k] = v;
                    model.j_theta(t, x, &th).unwrap()
                },
                theta[k],
                1e-6,
            );
            assert!((h[k] - fd).abs() < 1e-7, "{} h{}: {} vs {fd}", model.variant.name(), k + 1, h[k]);
        }
    }
}

#[test]
fn training_is_independent_of_thread_count() {
    let model = log_model(ModelVariant::LogConstrained {
        bounds: IntervalBounds::long_only_unlevered(),
    });
    let cfg = LearnConfig {
        iterations: 8,
        paths: 64,
        grid: SimGrid::new(1.0, 0.02).unwrap(),
        seed: 11,
        ..LearnConfig::log_defaults()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&model, &cfg).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one.trace.len(), 9);
    assert_eq!(one, train(&model, &cfg).unwrap());
}

#[test]
fn trace_csv_has_one_row_per_update() {
    let model = log_model(ModelVariant::LogUnconstrained);
    let cfg = LearnConfig {
        iterations: 3,
        paths: 10,
        grid: SimGrid::new(1.0, 0.1).unwrap(),
        ..LearnConfig::log_defaults()
    };
    let out = train(&model, &cfg).unwrap();
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, &out.trace).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iter,theta1,phi1,phi2,grad_norm_theta,grad_norm_phi");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,"));
    let back: f64 = lines[4].split(',').nth(1).unwrap().parse().unwrap();
    assert!((back - out.theta[0]).abs() <= 5e-12 * out.theta[0].abs());
}
