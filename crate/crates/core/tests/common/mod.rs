//! Test-only oracles, deliberately independent of the library's numerics:
//! adaptive Simpson quadrature with Richardson correction, central finite
//! differences and a plain Gaussian density.
#![allow(dead_code)]

use std::f64::consts::PI;

pub fn gauss_pdf(y: f64) -> f64 {
    (-0.5 * y * y).exp() / (2.0 * PI).sqrt()
}

fn simpson_rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson on `[a, b]`, pre-split into unit panels so narrow peaks
/// are not missed.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let panels = ((b - a).abs().ceil() as usize).clamp(1, 4096);
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (flo, fmid, fhi) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi);
            simpson_rec(&f, lo, hi, flo, fmid, fhi, whole, tol / panels as f64, 40)
        })
        .sum()
}

/// Central difference of `f` at `x`.
pub fn central_diff<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Second central difference.
pub fn second_diff<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

/// Moments of `N(loc, sd²)` truncated to `[lo, hi]`, by quadrature in
/// standardised coordinates. Infinite ends are cut 40 sd out.
pub struct TruncOracle {
    pub mean: f64,
    pub var: f64,
    pub entropy: f64,
    pub mass: f64,
}

fn standard_window(loc: f64, sd: f64, lo: f64, hi: f64) -> (f64, f64) {
    let a = if lo.is_finite() { (lo - loc) / sd } else { -40.0 };
    let b = if hi.is_finite() { (hi - loc) / sd } else { 40.0 };
    (a.max(-40.0), b.min(40.0))
}

pub fn trunc_oracle(loc: f64, sd: f64, lo: f64, hi: f64) -> TruncOracle {
    trunc_oracle_tol(loc, sd, lo, hi, 1e-15)
}

/// [`trunc_oracle`] with a chosen absolute tolerance; wide windows need a
/// looser one, since it is split across unit panels.
pub fn trunc_oracle_tol(loc: f64, sd: f64, lo: f64, hi: f64, tol: f64) -> TruncOracle {
    let (a, b) = standard_window(loc, sd, lo, hi);
    // scale by the density's peak on the window so tail windows integrate O(1) values
    let y0 = 0.0f64.clamp(a, b);
    let ln_q = |y: f64| -0.5 * (y * y - y0 * y0);
    let q = |y: f64| ln_q(y).exp();
    let zq = adaptive_simpson(q, a, b, tol);
    let m1 = adaptive_simpson(|y| y * q(y), a, b, tol) / zq;
    let m2c = adaptive_simpson(|y| (y - m1) * (y - m1) * q(y), a, b, tol) / zq;
    // −∫p ln p with p = q/zq on the standard scale, then shift by ln sd
    let h = adaptive_simpson(|y| -q(y) / zq * (ln_q(y) - zq.ln()), a, b, tol);
    TruncOracle {
        mean: loc + sd * m1,
        var: sd * sd * m2c,
        entropy: h + sd.ln(),
        mass: gauss_pdf(y0) * zq,
    }
}

/// `KL(p‖q)` for two Gaussians truncated to the same `[lo, hi]`.
pub fn kl_oracle(p: (f64, f64), q: (f64, f64), lo: f64, hi: f64) -> f64 {
    let (pl, ps) = p;
    let (ql, qs) = q;
    let (pa, pb) = standard_window(pl, ps, lo, hi);
    let zp = adaptive_simpson(gauss_pdf, pa, pb, 1e-15);
    let (qa, qb) = standard_window(ql, qs, lo, hi);
    let zq = adaptive_simpson(gauss_pdf, qa, qb, 1e-15);
    // integrate on p's standard scale where p has its mass
    adaptive_simpson(
        |y| {
            let x = pl + ps * y;
            let lp = -0.5 * y * y - ps.ln() - zp.ln();
            let yq = (x - ql) / qs;
            let lq = -0.5 * yq * yq - qs.ln() - zq.ln();
            gauss_pdf(y) / zp * (lp - lq)
        },
        pa,
        pb,
        1e-15,
    )
}

/// Sample mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn sample_var(xs: &[f64]) -> f64 {
    let (m, se) = mean_se(xs);
    let _ = m;
    se * se * xs.len() as f64
}
