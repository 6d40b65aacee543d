//! Closed-form phase calculation and the anti-wrapping function.
//!
//! Every phase produced or compared in this crate goes through these
//! helpers, so the `(-π, π]` convention is decided in exactly one place.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{Error, Result};

/// An angle in the principal interval `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct WrappedAngle(f64);

impl WrappedAngle {
    /// Accepts `value` only if it already lies in `(-π, π]`.
    pub fn new(value: f64) -> Result<Self> {
        if value > -PI && value <= PI {
            Ok(Self(value))
        } else {
            Err(Error::Invalid(format!("{value} is outside (-π, π]")))
        }
    }

    /// Wraps any finite real into `(-π, π]`.
    pub fn wrap(x: f64) -> Self {
        Self(wrap(x))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<WrappedAngle> for f64 {
    fn from(a: WrappedAngle) -> f64 {
        a.0
    }
}

/// `+1` for `x >= 0` (zero included), `-1` otherwise.
#[inline]
pub fn sgn_star(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Phase of the complex number `r + j·i`, in `(-π, π]`.
///
/// Evaluated through the arctangent-plus-quadrant-correction form rather than
/// `atan2`, so the two can be checked against each other. `phi(0, 0) = 0`,
/// and `r = 0` takes the `±π/2` limit of the arctangent.
#[inline]
pub fn phi(r: f64, i: f64) -> f64 {
    if r == 0.0 {
        return if i == 0.0 {
            0.0
        } else if i > 0.0 {
            FRAC_PI_2
        } else {
            -FRAC_PI_2
        };
    }
    let p = (i / r).atan() - FRAC_PI_2 * sgn_star(i) * (sgn_star(r) - 1.0);
    // I/R can underflow to +0 in the third quadrant, which would land on -π.
    if p <= -PI {
        PI
    } else {
        p
    }
}

/// Partial derivatives `(∂φ/∂r, ∂φ/∂i)` of [`phi`]; zero at the origin.
#[inline]
pub fn phi_grad(r: f64, i: f64) -> (f64, f64) {
    let m = r * r + i * i;
    if m == 0.0 {
        (0.0, 0.0)
    } else {
        (-i / m, r / m)
    }
}

/// Reduces `x` to `x - 2π·round(x / 2π)`, a value in `[-π, π]`.
///
/// `round` is half-away-from-zero, so an exact tie at `x/2π = ±0.5` maps to
/// `∓π`.
#[inline]
fn principal_residual(x: f64) -> f64 {
    x - TAU * (x / TAU).round()
}

/// Wraps a real into `(-π, π]`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let y = principal_residual(x);
    if y <= -PI {
        PI
    } else if y > PI {
        // unreachable for finite x, kept for rounding of huge magnitudes
        y - TAU
    } else {
        y
    }
}

/// The anti-wrapping function `|x - 2π·round(x/2π)|`, in `[0, π]`.
#[inline]
pub fn anti_wrap(x: f64) -> f64 {
    principal_residual(x).abs().min(PI)
}

/// Sub-gradient of [`anti_wrap`].
///
/// `±1` away from the kinks; `0` at a zero residual and at the ties
/// `x ≡ π (mod 2π)` where the one-sided derivatives disagree.
#[inline]
pub fn anti_wrap_grad(x: f64) -> f64 {
    let y = principal_residual(x);
    if y == 0.0 || y.abs() >= PI {
        0.0
    } else {
        y.signum()
    }
}

/// Shortest circular distance between two wrapped phases.
pub fn true_phase_error(p_hat: WrappedAngle, p: WrappedAngle) -> f64 {
    let d = (p_hat.0 - p.0).abs();
    d.min(TAU - d)
}
