//! Gaussian and truncated-Gaussian algebra.
//!
//! Infinite truncation bounds are plain `f64` infinities; every formula takes
//! the analytic limit at them (`φ(±∞) = 0`, `Φ(−∞) = 0`, `Φ(+∞) = 1`,
//! `y·φ(y) → 0`).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quad;

/// The circle constant times two. Kept apart from anything named after the
/// portfolio fraction.
pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Windows whose Gaussian mass falls below this are rejected.
pub const MIN_NORMALIZER: f64 = 1e-300;

pub fn std_normal_pdf(y: f64) -> f64 {
    if y.is_infinite() {
        return 0.0;
    }
    INV_SQRT_2PI * (-0.5 * y * y).exp()
}

pub fn std_normal_cdf(y: f64) -> f64 {
    0.5 * libm::erfc(-y * std::f64::consts::FRAC_1_SQRT_2)
}

/// Upper tail `1 − Φ(y)` without cancellation.
pub fn std_normal_sf(y: f64) -> f64 {
    0.5 * libm::erfc(y * std::f64::consts::FRAC_1_SQRT_2)
}

/// `y·φ(y)`, zero at the infinities.
fn y_pdf(y: f64) -> f64 {
    if y.is_infinite() {
        0.0
    } else {
        y * std_normal_pdf(y)
    }
}

/// Standard normal quantile (Wichura's AS241, relative accuracy ~1e-16).
pub fn std_normal_inv_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r
                + 6.726_577_092_700_87e4)
                * r
                + 4.592_195_393_154_987e4)
                * r
                + 1.373_169_376_550_946e4)
                * r
                + 1.971_590_950_306_551_3e3)
                * r
                + 1.331_416_678_917_843_8e2)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((5.226_495_278_852_545e3 * r + 2.872_908_573_572_194_3e4) * r
                + 3.930_789_580_009_271e4)
                * r
                + 2.121_379_430_158_659_7e4)
                * r
                + 5.394_196_021_424_751e3)
                * r
                + 6.871_870_074_920_579e2)
                * r
                + 4.231_333_070_160_091e1)
                * r
                + 1.0);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        (((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((1.050_750_071_644_416_8e-9 * r + 5.475_938_084_995_345e-4) * r
                + 1.519_866_656_361_645_7e-2)
                * r
                + 1.481_039_764_274_800_8e-1)
                * r
                + 6.897_673_349_851e-1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_759)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((2.010_334_399_292_288e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_049e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103)
            / (((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_133e-4)
                * r
                + 1.487_536_129_085_061_5e-2)
                * r
                + 1.369_298_809_227_358e-1)
                * r
                + 5.998_322_065_558_88e-1)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Untruncated Gaussian policy `N(mean, var)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean: f64,
    pub var: f64,
}

impl GaussianPolicy {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !mean.is_finite() {
            return Err(invalid("mean", format!("must be finite, got {mean}")));
        }
        if !(var > 0.0 && var.is_finite()) {
            return Err(invalid("var", format!("must be positive and finite, got {var}")));
        }
        Ok(Self { mean, var })
    }

    pub fn std_dev(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        std_normal_pdf((x - self.mean) / self.std_dev()) / self.std_dev()
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * d * d / self.var - 0.5 * self.var.ln() - LN_SQRT_2PI
    }

    pub fn second_moment(&self) -> f64 {
        self.mean * self.mean + self.var
    }

    /// Differential entropy in nats: `½ + ln(√var·√(2π))`.
    pub fn entropy(&self) -> f64 {
        0.5 + 0.5 * self.var.ln() + LN_SQRT_2PI
    }

    pub fn sample(&self, u: f64) -> f64 {
        self.mean + self.std_dev() * std_normal_inv_cdf(u)
    }

    pub fn truncate(&self, lower: f64, upper: f64) -> Result<TruncatedGaussianPolicy> {
        TruncatedGaussianPolicy::new(self.mean, self.var, lower, upper)
    }

    pub fn untruncated(&self) -> TruncatedGaussianPolicy {
        TruncatedGaussianPolicy::new(self.mean, self.var, f64::NEG_INFINITY, f64::INFINITY)
            .expect("validated gaussian")
    }
}

/// `N(loc, var)` restricted and renormalised to `[lower, upper]`.
///
/// Standardised bounds and the normalizer are cached at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedGaussianPolicy {
    loc: f64,
    var: f64,
    lower: f64,
    upper: f64,
    scale: f64,
    a_std: f64,
    b_std: f64,
    z: f64,
    // mean and variance of the standardised variable
    y_mean: f64,
    y_var: f64,
}

/// Windows narrower than this (in standard deviations) get their moments by
/// quadrature around the midpoint instead of differences of densities.
const NARROW_WINDOW: f64 = 0.5;

/// `(Z, E[Y], Var[Y])` for `Y ~ N(0,1)` restricted to `[a, b]`.
fn standardized_moments(a: f64, b: f64) -> (f64, f64, f64) {
    if b - a <= NARROW_WINDOW {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let w = |s: f64| (-c * s - 0.5 * s * s).exp();
        let i0 = quad::integrate(w, -h, h, 0.0, 1e-15);
        let i1 = quad::integrate(|s| s * w(s), -h, h, 0.0, 1e-15);
        let i2 = quad::integrate(|s| s * s * w(s), -h, h, 0.0, 1e-15);
        let es = i1 / i0;
        let z = std_normal_pdf(c) * i0;
        return (z, c + es, (i2 / i0 - es * es).max(0.0));
    }
    let z = gaussian_mass(a, b);
    let g = (std_normal_pdf(a) - std_normal_pdf(b)) / z;
    let yg = (y_pdf(a) - y_pdf(b)) / z;
    (z, g, 1.0 + yg - g * g)
}

impl TruncatedGaussianPolicy {
    pub fn new(loc: f64, var: f64, lower: f64, upper: f64) -> Result<Self> {
        if !loc.is_finite() {
            return Err(invalid("loc", format!("must be finite, got {loc}")));
        }
        if !(var > 0.0 && var.is_finite()) {
            return Err(invalid("var", format!("must be positive and finite, got {var}")));
        }
        if lower.is_nan() || upper.is_nan() || lower >= upper {
            return Err(invalid("bounds", format!("need lower < upper, got [{lower}, {upper}]")));
        }
        let scale = var.sqrt();
        let a_std = (lower - loc) / scale;
        let b_std = (upper - loc) / scale;
        let (z, y_mean, y_var) = standardized_moments(a_std, b_std);
        if !(z >= MIN_NORMALIZER) {
            return Err(Error::DegenerateSupport(z));
        }
        Ok(Self {
            loc,
            var,
            lower,
            upper,
            scale,
            a_std,
            b_std,
            z,
            y_mean,
            y_var,
        })
    }

    /// Location of the parent Gaussian.
    pub fn loc(&self) -> f64 {
        self.loc
    }
    /// Variance of the parent Gaussian.
    pub fn parent_var(&self) -> f64 {
        self.var
    }
    pub fn lower(&self) -> f64 {
        self.lower
    }
    pub fn upper(&self) -> f64 {
        self.upper
    }
    /// Standardised bounds `(A, B)`.
    pub fn standardized_bounds(&self) -> (f64, f64) {
        (self.a_std, self.b_std)
    }
    /// Parent mass of the window, `Φ(B) − Φ(A)`.
    pub fn normalizer(&self) -> f64 {
        self.z
    }
    pub fn is_truncated(&self) -> bool {
        self.lower.is_finite() || self.upper.is_finite()
    }
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    pub fn mean(&self) -> f64 {
        self.loc + self.scale * self.y_mean
    }

    pub fn variance(&self) -> f64 {
        self.var * self.y_var
    }

    pub fn second_moment(&self) -> f64 {
        let m = self.mean();
        m * m + self.variance()
    }

    pub fn entropy(&self) -> f64 {
        let ey2 = self.y_var + self.y_mean * self.y_mean;
        0.5 * self.var.ln() + LN_SQRT_2PI + self.z.ln() + 0.5 * ey2
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if !self.contains(x) {
            return 0.0;
        }
        std_normal_pdf((x - self.loc) / self.scale) / (self.scale * self.z)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !self.contains(x) {
            return f64::NEG_INFINITY;
        }
        let y = (x - self.loc) / self.scale;
        -0.5 * y * y - self.scale.ln() - LN_SQRT_2PI - self.z.ln()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lower {
            return 0.0;
        }
        if x >= self.upper {
            return 1.0;
        }
        let y = (x - self.loc) / self.scale;
        (gaussian_mass(self.a_std, y) / self.z).clamp(0.0, 1.0)
    }

    /// Inverse-CDF draw from a uniform variate `u ∈ (0, 1)`.
    pub fn sample(&self, u: f64) -> f64 {
        let y = if self.a_std > 0.0 {
            // Window in the upper tail: work with survival probabilities.
            -std_normal_inv_cdf(std_normal_sf(self.a_std) - u * self.z)
        } else {
            std_normal_inv_cdf(std_normal_cdf(self.a_std) + u * self.z)
        };
        (self.loc + self.scale * y).clamp(self.lower, self.upper)
    }
}

impl From<GaussianPolicy> for TruncatedGaussianPolicy {
    fn from(g: GaussianPolicy) -> Self {
        g.untruncated()
    }
}

/// `Φ(b) − Φ(a)` for `a < b`, evaluated on whichever tail avoids cancellation.
pub fn gaussian_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        std_normal_sf(a) - std_normal_sf(b)
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

pub fn trunc_mean(p: &TruncatedGaussianPolicy) -> f64 {
    p.mean()
}

pub fn trunc_variance(p: &TruncatedGaussianPolicy) -> f64 {
    p.variance()
}

pub fn trunc_second_moment(p: &TruncatedGaussianPolicy) -> f64 {
    p.second_moment()
}

pub fn gaussian_entropy(p: &GaussianPolicy) -> f64 {
    p.entropy()
}

pub fn trunc_entropy(p: &TruncatedGaussianPolicy) -> f64 {
    p.entropy()
}

pub fn trunc_sample(p: &TruncatedGaussianPolicy, u: f64) -> f64 {
    p.sample(u)
}

/// Effective integration range of `p`: its support, with infinite ends cut
/// 40 parent standard deviations from the location.
fn effective_support(p: &TruncatedGaussianPolicy) -> (f64, f64) {
    let reach = 40.0 * p.scale;
    (
        p.lower.max(p.loc - reach),
        p.upper.min(p.loc + reach),
    )
}

/// `KL(p ‖ q) = ∫ p ln(p/q)` by adaptive quadrature over the support of `p`.
pub fn kl_trunc(p: &TruncatedGaussianPolicy, q: &TruncatedGaussianPolicy) -> Result<f64> {
    if p.lower < q.lower || p.upper > q.upper {
        return Err(Error::SupportMismatch);
    }
    if p == q {
        return Ok(0.0);
    }
    let (lo, hi) = effective_support(p);
    // Split at the location of p so the peak never falls between nodes.
    let integrand = |x: f64| {
        let lp = p.ln_pdf(x);
        if lp == f64::NEG_INFINITY {
            0.0
        } else {
            lp.exp() * (lp - q.ln_pdf(x))
        }
    };
    let mid = p.loc.clamp(lo, hi);
    let kl = quad::integrate(integrand, lo, mid, 1e-14, 1e-12)
        + quad::integrate(integrand, mid, hi, 1e-14, 1e-12);
    Ok(kl.max(0.0))
}
