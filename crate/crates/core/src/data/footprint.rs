//! Share of an isotropic Gaussian photon density falling inside a ground region.
//!
//! The density is centered at the origin with standard deviation `sigma` per
//! axis. Rectangles have a closed form (product of 1-D interval masses);
//! discs and the quadrature cross-check use nested adaptive Gauss–Kronrod.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

/// Absolute tolerance of the disc quadrature.
pub const QUAD_TOL: f64 = 1e-6;
const MAX_DEPTH: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Region {
    Plane,
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Region {
    pub fn centered_square(side: f64) -> Self {
        let h = side / 2.0;
        Region::Rect {
            x0: -h,
            y0: -h,
            x1: h,
            y1: h,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Region::Plane => true,
            Region::Rect { x0, y0, x1, y1 } => {
                [x0, y0, x1, y1].iter().all(|v| v.is_finite()) && x0 < x1 && y0 < y1
            }
            Region::Disc { cx, cy, r } => cx.is_finite() && cy.is_finite() && r.is_finite() && r > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate region {self:?}")))
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn interval_mass(a: f64, b: f64, sigma: f64) -> f64 {
    std_normal_cdf(b / sigma) - std_normal_cdf(a / sigma)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")))
    }
}

/// Energy fraction: closed form for rectangles, quadrature for discs.
pub fn footprint_fraction(sigma: f64, region: &Region) -> Result<f64> {
    check_sigma(sigma)?;
    region.validate()?;
    match *region {
        Region::Plane => Ok(1.0),
        Region::Rect { x0, y0, x1, y1 } => Ok(interval_mass(x0, x1, sigma) * interval_mass(y0, y1, sigma)),
        Region::Disc { .. } => quadrature_fraction(sigma, region, QUAD_TOL),
    }
}

/// Energy fraction by nested adaptive quadrature of the 2-D density, used for
/// discs and to cross-check the rectangle closed form.
pub fn quadrature_fraction(sigma: f64, region: &Region, tol: f64) -> Result<f64> {
    check_sigma(sigma)?;
    region.validate()?;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let density = |x: f64, y: f64| norm * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
    let value = match *region {
        Region::Plane => return Ok(1.0),
        Region::Rect { x0, y0, x1, y1 } => {
            let inner_tol = tol / (x1 - x0) * 1e-2;
            adaptive(&|x| adaptive(&|y| density(x, y), y0, y1, inner_tol), x0, x1, tol)
        }
        Region::Disc { cx, cy, r } => {
            let inner_tol = tol / (2.0 * r) * 1e-2;
            adaptive(
                &|x| {
                    let dx = x - cx;
                    let half = (r * r - dx * dx).max(0.0).sqrt();
                    if half == 0.0 {
                        0.0
                    } else {
                        adaptive(&|y| density(x, y), cy - half, cy + half, inner_tol)
                    }
                },
                cx - r,
                cx + r,
                tol,
            )
        }
    };
    Ok(value)
}

/// Solves for σ such that the centered square of the given side receives
/// `target` of the energy: `(2Φ(side/2σ) − 1)² = target`.
pub fn solve_sigma_for_center_fraction(target: f64, side: f64) -> Result<f64> {
    if !(side > 0.0 && side.is_finite()) {
        return Err(Error::InvalidArgument(format!("square side must be positive, got {side}")));
    }
    let f = |s: f64| interval_mass(-side / 2.0, side / 2.0, s).powi(2) - target;
    // The fraction falls monotonically from 1 to 0 as σ grows.
    let (mut lo, mut hi) = (side * 1e-4, side * 1e4);
    if !(f(lo) > 0.0 && f(hi) < 0.0) {
        return Err(Error::Numerical(format!(
            "no sigma in [{lo}, {hi}] m gives a fraction of {target} for a {side} m square"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

// Gauss–Kronrod 7/15 nodes on [−1, 1] (non-negative half, descending).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
// Gauss weights for the odd Kronrod nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn go(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (value, err) = gk15(f, a, b);
        if err <= tol || depth >= MAX_DEPTH {
            return value;
        }
        let m = 0.5 * (a + b);
        go(f, a, m, tol / 2.0, depth + 1) + go(f, m, b, tol / 2.0, depth + 1)
    }
    go(f, a, b, tol, 0)
}
