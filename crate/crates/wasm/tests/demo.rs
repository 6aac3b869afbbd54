use explorer_wasm::demo::{cost_curve, policy_density, wealth_histogram};
use explorer_wasm::Setup;

fn unit_box() -> Setup {
    Setup::new(0.03, 0.08, 0.3, 0.0, 1.0, 1.0)
}

#[test]
fn density_integrates_to_one() {
    let s = policy_density(&unit_box(), 0.1, 2001).unwrap();
    let pts: Vec<(f64, f64)> = s.points().collect();
    let area: f64 = pts.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum();
    assert!((area - 1.0).abs() < 1e-4, "area {area}");
    assert!(pts.iter().all(|&(x, _)| (0.0..=1.0).contains(&x)));
}

#[test]
fn free_cost_is_half_mt() {
    let free = Setup::new(0.03, 0.08, 0.3, f64::NEG_INFINITY, f64::INFINITY, 2.0);
    for (m, c) in cost_curve(&free, 0.001, 2.0, 30).unwrap().points() {
        assert_eq!(c, m);
    }
    let boxed = cost_curve(&unit_box(), 0.001, 2.0, 30).unwrap();
    assert!(boxed.points().all(|(m, c)| c <= 0.5 * m + 1e-15));
}

#[test]
fn histogram_is_a_density() {
    let h = wealth_histogram(&unit_box(), 0.1, 2000, 40, 1).unwrap();
    let pts: Vec<(f64, f64)> = h.points().collect();
    let width = pts[1].0 - pts[0].0;
    let area: f64 = pts.iter().map(|p| p.1 * width).sum();
    assert!((area - 1.0).abs() < 1e-12);
    assert_eq!(h, wealth_histogram(&unit_box(), 0.1, 2000, 40, 1).unwrap());
}

#[test]
fn bad_input_is_an_error() {
    assert!(policy_density(&Setup::new(0.03, 0.08, -0.3, 0.0, 1.0, 1.0), 0.1, 10).is_err());
    assert!(cost_curve(&unit_box(), 1.0, 0.5, 10).is_err());
    assert!(policy_density(&Setup::new(0.03, 0.08, 0.3, 1.0, 0.0, 1.0), 0.1, 10).is_err());
}
