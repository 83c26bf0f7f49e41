//! Random variate generation and log densities used by the samplers and the
//! verification oracle.
//!
//! Density conventions for [`logpdf`]:
//!
//! | distribution   | convention |
//! |----------------|------------|
//! | normal         | normalized |
//! | gamma          | normalized (shape/rate) |
//! | inverse gamma  | normalized, `∝ x^(-1-shape) exp(-rate/x)` |
//! | GIG            | unnormalized kernel `x^(order-1) exp(-(chi/x + psi x)/2)` |
//! | horseshoe      | unnormalized, `-ln(1+υ) - ln(υ)/2` (law of κ², κ ~ C⁺(0,1)) |
//! | lasso          | unnormalized, `-υ` (unit-rate exponential) |
//!
//! Everything outside its support evaluates to `-∞`.

mod gig;
mod rng;

use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

pub use gig::GigParams;
pub use rng::{stream_key, RngSnapshot, RngStream};

use crate::{Error, Result};

/// Smallest value a variance draw may take. Only keeps draws away from an
/// exact zero; it is not a statistical floor.
pub const VARIANCE_FLOOR: f64 = 1e-300;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[inline]
pub(crate) fn floor_variance(x: f64) -> f64 {
    if x < VARIANCE_FLOOR {
        VARIANCE_FLOOR
    } else {
        x
    }
}

#[inline]
pub(crate) fn std_normal(rng: &mut RngStream) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws from N(mean, variance). A zero variance returns `mean` exactly.
pub fn sample_normal(mean: f64, variance: f64, rng: &mut RngStream) -> Result<f64> {
    if !(variance >= 0.0) || !variance.is_finite() || !mean.is_finite() {
        return Err(Error::param(format!("normal(mean={mean}, variance={variance})")));
    }
    if variance == 0.0 {
        return Ok(mean);
    }
    Ok(mean + variance.sqrt() * std_normal(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseGammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl InverseGammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite() {
            Ok(Self { shape, rate })
        } else {
            Err(Error::param(format!("inverse gamma(shape={shape}, rate={rate})")))
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        inv_gamma_unchecked(self.shape, self.rate, rng)
    }

    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.rate / (self.shape - 1.0))
    }

    pub fn logpdf(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) - (self.shape + 1.0) * x.ln() - self.rate / x
    }
}

#[inline]
pub(crate) fn inv_gamma_unchecked(shape: f64, rate: f64, rng: &mut RngStream) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0)
        .expect("inverse gamma shape must be positive")
        .sample(rng);
    floor_variance(rate / g)
}

pub fn sample_inverse_gamma(p: InverseGammaParams, rng: &mut RngStream) -> Result<f64> {
    let p = InverseGammaParams::new(p.shape, p.rate)?;
    Ok(p.sample(rng))
}

pub fn sample_gig(p: GigParams, rng: &mut RngStream) -> Result<f64> {
    p.validate()?;
    Ok(floor_variance(p.sample(rng)))
}

/// Draws `(κ², ξ)` with `ξ ~ IG(1/2, 1)` and `κ² | ξ ~ IG(1/2, 1/ξ)`, so that
/// `κ ~ C⁺(0, 1)` and `κ²` follows the horseshoe law.
pub fn sample_halfcauchy_sq(rng: &mut RngStream) -> (f64, f64) {
    let xi = inv_gamma_unchecked(0.5, 1.0, rng);
    let kappa_sq = inv_gamma_unchecked(0.5, 1.0 / xi, rng);
    (kappa_sq, xi)
}

/// A distribution whose log density can be evaluated by [`logpdf`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Density {
    Normal { mean: f64, variance: f64 },
    Gamma { shape: f64, rate: f64 },
    InverseGamma(InverseGammaParams),
    Gig(GigParams),
    Horseshoe,
    Lasso,
}

pub fn logpdf(density: &Density, x: f64) -> f64 {
    match *density {
        Density::Normal { mean, variance } => normal_logpdf(x, mean, variance),
        Density::Gamma { shape, rate } => {
            if !(x > 0.0) {
                return f64::NEG_INFINITY;
            }
            shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
        }
        Density::InverseGamma(p) => p.logpdf(x),
        Density::Gig(p) => p.log_kernel(x),
        Density::Horseshoe => horseshoe_log_kernel(x),
        Density::Lasso => lasso_log_kernel(x),
    }
}

#[inline]
pub fn normal_logpdf(x: f64, mean: f64, variance: f64) -> f64 {
    if !(variance > 0.0) {
        return f64::NEG_INFINITY;
    }
    let r = x - mean;
    -0.5 * (LN_2PI + variance.ln() + r * r / variance)
}

/// `-ln(1+υ) - ln(υ)/2`: the density of κ² for a standard half-Cauchy κ,
/// without its `1/π` constant.
#[inline]
pub fn horseshoe_log_kernel(v: f64) -> f64 {
    if !(v > 0.0) || !v.is_finite() {
        return f64::NEG_INFINITY;
    }
    -v.ln_1p() - 0.5 * v.ln()
}

#[inline]
pub fn lasso_log_kernel(v: f64) -> f64 {
    if !(v >= 0.0) || !v.is_finite() {
        return f64::NEG_INFINITY;
    }
    -v
}

/// Lanczos approximation (g = 7, n = 9), ~15 significant digits for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}
