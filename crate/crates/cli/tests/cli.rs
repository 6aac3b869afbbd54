use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use explorer_core::closedform_log::{exploration_cost_constrained, exploration_cost_unconstrained, IntervalBounds};
use explorer_core::MarketParams;

fn explorer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_explorer"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

const SMALL_TRAINING: &str = r#"
experiment = "train-log-constrained"
seeds = [0, 1]

[learn]
iterations = 12
paths = 40
checkpoints = [6, 12]
density_points = 21
"#;

#[test]
fn list_names_every_experiment_and_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = explorer(&["list"], tmp.path());
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for name in [
        "cost-curve",
        "value-gap",
        "wealth-density",
        "train-log-constrained",
        "policy-dirac-limit",
        "train-quadratic",
        "factor-demo",
        "log_constrained_sec53",
        "quadratic_sec63",
    ] {
        assert!(text.contains(name), "missing {name}");
    }
}

#[test]
fn check_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&explorer(&["check", "log_constrained_sec53"], dir)), 0);
    assert_eq!(code(&explorer(&["check", "quadratic_sec63"], dir)), 0);
    write(dir, "unknown.toml", "experiment = \"nope\"\n");
    assert_eq!(code(&explorer(&["check", "unknown.toml"], dir)), 2);
    write(dir, "typo.toml", "experiment = \"cost-curve\"\n[cost_curve]\npionts = 3\n");
    assert_eq!(code(&explorer(&["check", "typo.toml"], dir)), 2);
    write(dir, "noseeds.toml", "experiment = \"cost-curve\"\nseeds = []\n");
    assert_eq!(code(&explorer(&["check", "noseeds.toml"], dir)), 2);
    assert_eq!(code(&explorer(&["check", "missing.toml"], dir)), 2);
    assert_eq!(code(&explorer(&["run", "missing.toml"], dir)), 2);
}

#[test]
fn unwritable_output_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "blocker", "a file, not a directory");
    let out = explorer(&["run", "cost_curve", "--out", "blocker/sub"], tmp.path());
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "div.toml",
        "experiment = \"train-log-constrained\"\n[learn]\niterations = 5\npaths = 10\ndivergence_bound = 0.05\n",
    );
    let out = explorer(&["run", "div.toml", "--out", "o"], tmp.path());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "train.toml", SMALL_TRAINING);
    for (cfg, extra) in [("cost_curve", None), ("factor_demo", None), ("train.toml", Some("1"))] {
        let a = explorer(&["run", cfg, "--out", "a"], dir);
        assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
        let mut args = vec!["run", cfg, "--out", "b"];
        if let Some(k) = extra {
            args.extend(["--threads", k]);
        }
        assert_eq!(code(&explorer(&args, dir)), 0);
        let (fa, fb) = (read_dir_sorted(&dir.join("a")), read_dir_sorted(&dir.join("b")));
        assert_eq!(fa.len(), fb.len());
        for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
            assert_eq!(na, nb);
            assert!(ba == bb, "{cfg}: {na} differs between runs");
        }
        fs::remove_dir_all(dir.join("a")).unwrap();
        fs::remove_dir_all(dir.join("b")).unwrap();
    }
}

#[test]
fn training_outputs_follow_the_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "train.toml", SMALL_TRAINING);
    assert_eq!(code(&explorer(&["run", "train.toml", "--out", "o", "--seed", "7"], dir)), 0);
    let trace = fs::read_to_string(dir.join("o/trace_m0.01_seed7.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iter,theta1,theta2,phi1,phi2,grad_norm_theta,grad_norm_phi"));
    assert_eq!(lines.count(), 13);
    assert!(!trace.contains('\r'));
    let density = fs::read_to_string(dir.join("o/density_m0.01.csv")).unwrap();
    assert!(density.starts_with("pi,true_density,learned_density\n"));
    let checkpoints = fs::read_to_string(dir.join("o/checkpoints.csv")).unwrap();
    assert_eq!(checkpoints.lines().count(), 3);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([7]));
    assert!(manifest["version"].as_str().unwrap().starts_with('v'));
    let entry = &manifest["summary"]["by_m"][0];
    for key in ["theta_true", "theta_learned", "phi_true", "phi_learned", "value_true", "value_learned"] {
        assert!(!entry[key].is_null(), "summary lacks {key}");
    }
    let listed: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap()).collect();
    for (name, _) in read_dir_sorted(&dir.join("o")) {
        assert!(name == "manifest.json" || listed.contains(&name.as_str()), "{name} not in manifest");
    }
}

#[test]
fn empty_selection_writes_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "w.toml",
        "experiment = \"wealth-density\"\n[wealth_density]\npaths = 10\ntimes = []\nexport_paths = 0\n",
    );
    assert_eq!(code(&explorer(&["run", "w.toml", "--out", "o"], tmp.path())), 0);
    assert_eq!(fs::read_to_string(tmp.path().join("o/wealth_samples.csv")).unwrap(), "seed,m,path,t,log_wealth\n");
}

#[test]
fn trajectories_use_path_t_x() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "w.toml",
        "experiment = \"wealth-density\"\n[wealth_density]\nm = [0.1]\npaths = 10\nexport_paths = 2\n",
    );
    assert_eq!(code(&explorer(&["run", "w.toml", "--out", "o"], tmp.path())), 0);
    let text = fs::read_to_string(tmp.path().join("o/paths_m0.1_seed0.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("path,t,x"));
    assert_eq!(lines.next(), Some("0,0,1"));
    assert_eq!(text.lines().count(), 1 + 2 * 251);
}

/// Twelve significant digits bound the round-trip error by half a unit in the
/// twelfth digit, 5e-12 relative; re-evaluating at the rounded `m` adds a
/// comparable amount.
#[test]
fn cost_table_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&explorer(&["run", "cost_curve", "--out", "o"], tmp.path())), 0);
    let mkt = MarketParams::log_experiment();
    let mut reader = csv::Reader::from_path(tmp.path().join("o/cost_vs_m.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["family", "a", "b", "m", "cost"]);
    let mut n = 0;
    let mut worst = 0.0f64;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let f = |i: usize| -> f64 { rec[i].parse().unwrap() };
        let b = IntervalBounds::new(f(1), f(2)).unwrap();
        let m = f(3);
        let exact = if b.is_unbounded() {
            exploration_cost_unconstrained(m, 1.0)
        } else {
            exploration_cost_constrained(m, 1.0, &mkt, &b).unwrap()
        };
        worst = worst.max(((f(4) - exact) / exact).abs());
        n += 1;
    }
    assert_eq!(n, 8 * 60);
    assert!(worst <= 1e-11, "worst relative error {worst:e}");
}

#[test]
fn unconstrained_costs_are_exactly_half_mt() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&explorer(&["run", "cost_curve", "--out", "o"], tmp.path())), 0);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["summary"]["unconstrained_max_abs_diff_from_mT_over_2"], serde_json::json!(0.0));
}

#[test]
fn log_preset_matches_the_reference_training_setup() {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("presets/log_constrained_sec53.toml")).unwrap();
    let v: toml::Value = toml::from_str(&text).unwrap();
    let seeds: Vec<i64> = v["seeds"].as_array().unwrap().iter().map(|s| s.as_integer().unwrap()).collect();
    assert_eq!(seeds, (0..20).collect::<Vec<_>>());
    assert_eq!(v["dt"].as_float(), Some(0.004));
    let mkt = &v["market"];
    assert_eq!((mkt["r"].as_float(), mkt["mu"].as_float(), mkt["sigma"].as_float()), (Some(0.03), Some(0.08), Some(0.3)));
    let l = &v["learn"];
    assert_eq!(l["m"].as_array().unwrap()[0].as_float(), Some(0.01));
    assert_eq!(l["eta_theta"].as_float(), Some(0.01));
    assert_eq!(l["eta_phi"].as_float(), Some(0.001));
    assert_eq!(l["iterations"].as_integer(), Some(2000));
    assert_eq!(l["paths"].as_integer(), Some(1000));
    assert_eq!(l["decay"].as_float(), Some(0.51));
    assert_eq!(l["phi_init"]["kind"].as_str(), Some("true-with-noise"));
    assert_eq!(l["theta_init"]["std"].as_float(), Some(0.01));
}
