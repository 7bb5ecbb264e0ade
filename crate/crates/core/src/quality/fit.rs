//! Moment-matching fits of the generalized Gaussian (GGD) and asymmetric
//! generalized Gaussian (AGGD) distributions.

use alloc::format;

use crate::{Error, Result};

pub const SHAPE_MIN: f64 = 0.2;
pub const SHAPE_MAX: f64 = 10.0;
const GRID_POINTS: usize = 64;
const BISECTION_TOL: f64 = 1e-12;

/// Generalized Gaussian ratio `Γ(1/a)Γ(3/a)/Γ(2/a)²`, strictly decreasing
/// in `a` on `(0, ∞)`.
pub fn ggd_ratio(shape: f64) -> f64 {
    libm::exp(
        libm::lgamma(1.0 / shape) + libm::lgamma(3.0 / shape) - 2.0 * libm::lgamma(2.0 / shape),
    )
}

/// Asymmetric ratio `Γ(2/v)²/(Γ(1/v)Γ(3/v))`, the reciprocal of
/// [`ggd_ratio`] and strictly increasing.
pub fn aggd_ratio(shape: f64) -> f64 {
    1.0 / ggd_ratio(shape)
}

/// Result of inverting a monotone ratio over `[SHAPE_MIN, SHAPE_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSolution {
    pub shape: f64,
    /// The target was outside the ratio's range on the bracket and the
    /// shape was pinned to a bound.
    pub clamped: bool,
}

/// Finds `a` with `ggd_ratio(a) = target` by a coarse grid scan followed by
/// bisection, clamping to the bounds when the target is out of range.
pub fn solve_ggd_shape(target: f64) -> ShapeSolution {
    // g(a) = ggd_ratio(a) - target is decreasing.
    let g = |a: f64| ggd_ratio(a) - target;
    if g(SHAPE_MIN) <= 0.0 {
        return ShapeSolution { shape: SHAPE_MIN, clamped: g(SHAPE_MIN) < 0.0 };
    }
    if g(SHAPE_MAX) >= 0.0 {
        return ShapeSolution { shape: SHAPE_MAX, clamped: g(SHAPE_MAX) > 0.0 };
    }
    // log-spaced grid: the ratio varies fastest near the lower bound
    let span = libm::log(SHAPE_MAX / SHAPE_MIN);
    let at = |i: usize| SHAPE_MIN * libm::exp(span * i as f64 / GRID_POINTS as f64);
    let mut lo = SHAPE_MIN;
    let mut hi = SHAPE_MAX;
    for i in 1..=GRID_POINTS {
        let a = if i == GRID_POINTS { SHAPE_MAX } else { at(i) };
        if g(a) <= 0.0 {
            hi = a;
            lo = if i == 1 { SHAPE_MIN } else { at(i - 1) };
            break;
        }
    }
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ShapeSolution { shape: 0.5 * (lo + hi), clamped: false }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgdFit {
    pub alpha: f64,
    pub sigma2: f64,
    pub clamped: bool,
}

pub fn fit_ggd(samples: &[f64]) -> Result<GgdFit> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: samples.len() });
    }
    let n = samples.len() as f64;
    let m1 = samples.iter().map(|v| v.abs()).sum::<f64>() / n;
    let m2 = samples.iter().map(|v| v * v).sum::<f64>() / n;
    if !(m1 > 0.0) || !m2.is_finite() {
        return Err(Error::Degenerate("GGD fit on all-zero or non-finite samples".into()));
    }
    let sol = solve_ggd_shape(m2 / (m1 * m1));
    Ok(GgdFit { alpha: sol.shape, sigma2: m2, clamped: sol.clamped })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggdFit {
    pub nu: f64,
    pub eta: f64,
    pub sigma_l2: f64,
    pub sigma_r2: f64,
    pub clamped: bool,
}

/// AGGD fit. Left variance is taken over strictly negative samples, right
/// variance over nonnegative ones.
///
/// The variance ratio enters the correction factor through
/// `min(σl,σr)/max(σl,σr)`; the factor is invariant under `γ -> 1/γ`, and
/// using the ordered ratio makes the fit of `-x` bit-identical to the fit of
/// `x` with the sides swapped.
pub fn fit_aggd(samples: &[f64]) -> Result<AggdFit> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: samples.len() });
    }
    let (mut left_sq, mut left_n) = (0.0, 0usize);
    let (mut right_sq, mut right_n) = (0.0, 0usize);
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    for &v in samples {
        if !v.is_finite() {
            return Err(Error::Validation("AGGD fit on non-finite sample".into()));
        }
        let s = v * v;
        if v < 0.0 {
            left_sq += s;
            left_n += 1;
        } else {
            right_sq += s;
            right_n += 1;
        }
        abs_sum += v.abs();
        sq_sum += s;
    }
    if left_n == 0 || right_n == 0 {
        return Err(Error::Degenerate(format!(
            "AGGD fit on one-sided data ({left_n} negative, {right_n} nonnegative)"
        )));
    }
    let sigma_l2 = left_sq / left_n as f64;
    let sigma_r2 = right_sq / right_n as f64;
    if !(sigma_r2 > 0.0) {
        return Err(Error::Degenerate("AGGD fit with all nonnegative samples zero".into()));
    }
    let (sl, sr) = (libm::sqrt(sigma_l2), libm::sqrt(sigma_r2));
    let g = sl.min(sr) / sl.max(sr);
    let n = samples.len() as f64;
    let r = (abs_sum / n) * (abs_sum / n) / (sq_sum / n);
    let g2 = g * g;
    let big_r = r * (g2 * g + 1.0) * (g + 1.0) / ((g2 + 1.0) * (g2 + 1.0));
    // aggd_ratio(nu) = R  <=>  ggd_ratio(nu) = 1/R
    let sol = solve_ggd_shape(1.0 / big_r);
    let nu = sol.shape;
    let scale = libm::exp(
        libm::lgamma(2.0 / nu) - libm::lgamma(1.0 / nu)
            + 0.5 * (libm::lgamma(1.0 / nu) - libm::lgamma(3.0 / nu)),
    );
    let eta = (sr - sl) * scale;
    Ok(AggdFit { nu, eta, sigma_l2, sigma_r2, clamped: sol.clamped })
}
