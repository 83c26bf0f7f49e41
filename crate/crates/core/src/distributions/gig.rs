//! Generalized inverse Gaussian variates.
//!
//! Density kernel `x^(order-1) * exp(-(chi/x + psi*x)/2)` on `x > 0`.
//!
//! Sampling follows Hörmann & Leydold (2014), "Generating generalized inverse
//! Gaussian random variates": the problem is reduced to the two-parameter
//! form `x^(l-1) * exp(-omega/2 * (x + 1/x))` with `l = |order| >= 0` and
//! `omega = sqrt(chi*psi)`, which is then handled by one of three rejection
//! samplers depending on `(l, omega)`. Negative orders use the reciprocal
//! symmetry `X ~ GIG(l) => 1/X ~ GIG(-l)`. The boundary regimes `chi = 0` and
//! `psi = 0` reduce to gamma and inverse-gamma draws.

use std::f64::consts::PI;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::RngStream;
use crate::{Error, Result};

/// Below this, `chi` or `psi` is treated as exactly zero.
const ZERO_TOL: f64 = 10.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GigParams {
    pub order: f64,
    pub chi: f64,
    pub psi: f64,
}

impl GigParams {
    pub fn new(order: f64, chi: f64, psi: f64) -> Result<Self> {
        let p = Self { order, chi, psi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { order, chi, psi } = *self;
        if !(order.is_finite() && chi.is_finite() && psi.is_finite()) || chi < 0.0 || psi < 0.0 {
            return Err(Error::param(format!("GIG parameters out of range: {self:?}")));
        }
        let ok = (chi > 0.0 && psi > 0.0)
            || (chi == 0.0 && psi > 0.0 && order > 0.0)
            || (chi > 0.0 && psi == 0.0 && order < 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("GIG parameters outside every valid regime: {self:?}")))
        }
    }

    /// Unnormalized log density.
    pub fn log_kernel(&self, x: f64) -> f64 {
        if !(x > 0.0) || !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        (self.order - 1.0) * x.ln() - 0.5 * (self.chi / x + self.psi * x)
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        sample_unchecked(self.order, self.chi, self.psi, rng)
    }
}

/// Draws from GIG(order, chi, psi) without validating the regime.
pub(crate) fn sample_unchecked(order: f64, chi: f64, psi: f64, rng: &mut RngStream) -> f64 {
    if chi < ZERO_TOL && order > 0.0 {
        // Gamma(order, rate psi/2)
        return gamma(order, rng) * 2.0 / psi;
    }
    if psi < ZERO_TOL && order < 0.0 {
        // Inverse gamma(-order, rate chi/2)
        return chi / (2.0 * gamma(-order, rng));
    }

    let l = order.abs();
    let alpha = (chi / psi).sqrt();
    let omega = (chi * psi).sqrt();

    let y = if l > 2.0 || omega > 3.0 {
        rou_shifted(l, omega, rng)
    } else if l >= 1.0 - 2.25 * omega * omega || omega > 0.2 {
        rou_unshifted(l, omega, rng)
    } else {
        concave_free(l, omega, rng)
    };

    if order < 0.0 {
        alpha / y
    } else {
        alpha * y
    }
}

fn gamma(shape: f64, rng: &mut RngStream) -> f64 {
    Gamma::new(shape, 1.0)
        .expect("gamma shape is positive by regime check")
        .sample(rng)
}

/// Mode of `x^(l-1) exp(-omega/2 (x + 1/x))`.
fn mode(l: f64, omega: f64) -> f64 {
    if l >= 1.0 {
        (((l - 1.0) * (l - 1.0) + omega * omega).sqrt() + (l - 1.0)) / omega
    } else {
        omega / (((1.0 - l) * (1.0 - l) + omega * omega).sqrt() + (1.0 - l))
    }
}

/// Ratio-of-uniforms with the mode shifted to the origin.
fn rou_shifted(l: f64, omega: f64, rng: &mut RngStream) -> f64 {
    let t = 0.5 * (l - 1.0);
    let s = 0.25 * omega;
    let xm = mode(l, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);

    // Bounding rectangle: roots of a depressed cubic (Cardano, trigonometric form).
    let a = -(2.0 * (l + 1.0) / omega + xm);
    let b = 2.0 * (l - 1.0) * xm / omega - 1.0;
    let c = xm;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let fi = (-q / (2.0 * (-(p * p * p) / 27.0).sqrt())).acos();
    let fak = 2.0 * (-p / 3.0).sqrt();
    let y1 = fak * (fi / 3.0).cos() - a / 3.0;
    let y2 = fak * (fi / 3.0 + 4.0 / 3.0 * PI).cos() - a / 3.0;

    let uplus = (y1 - xm) * (t * y1.ln() - s * (y1 + 1.0 / y1) - nc).exp();
    let uminus = (y2 - xm) * (t * y2.ln() - s * (y2 + 1.0 / y2) - nc).exp();

    loop {
        let u = uminus + rng.open01() * (uplus - uminus);
        let v = rng.open01();
        let x = u / v + xm;
        if x <= 0.0 {
            continue;
        }
        if v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

/// Ratio-of-uniforms without mode shift.
fn rou_unshifted(l: f64, omega: f64, rng: &mut RngStream) -> f64 {
    let t = 0.5 * (l - 1.0);
    let s = 0.25 * omega;
    let xm = mode(l, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);

    let ym = ((l + 1.0) + ((l + 1.0) * (l + 1.0) + omega * omega).sqrt()) / omega;
    let um = (0.5 * (l + 1.0) * ym.ln() - s * (ym + 1.0 / ym) - nc).exp();

    loop {
        let u = um * rng.open01();
        let v = rng.open01();
        let x = u / v;
        if v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

/// Rejection from a three-piece hat for the non-T-concave corner
/// (`l < 1`, small `omega`).
fn concave_free(l: f64, omega: f64, rng: &mut RngStream) -> f64 {
    let xm = mode(l, omega);
    let x0 = omega / (1.0 - l);

    let k0 = ((l - 1.0) * xm.ln() - 0.5 * omega * (xm + 1.0 / xm)).exp();
    let a0 = k0 * x0;

    let (k1, a1, k2, a2);
    if x0 >= 2.0 / omega {
        k1 = 0.0;
        a1 = 0.0;
        k2 = x0.powf(l - 1.0);
        a2 = k2 * 2.0 * (-omega * x0 / 2.0).exp() / omega;
    } else {
        k1 = (-omega).exp();
        a1 = if l == 0.0 {
            k1 * (2.0 / (omega * omega)).ln()
        } else {
            k1 / l * ((2.0 / omega).powf(l) - x0.powf(l))
        };
        k2 = (2.0 / omega).powf(l - 1.0);
        a2 = k2 * 2.0 * (-1.0f64).exp() / omega;
    }
    let total = a0 + a1 + a2;

    loop {
        let mut v = total * rng.open01();
        let (x, hx);
        if v <= a0 {
            x = x0 * v / a0;
            hx = k0;
        } else if v <= a0 + a1 {
            v -= a0;
            if l == 0.0 {
                x = omega * (omega.exp() * v).exp();
                hx = k1 / x;
            } else {
                x = (x0.powf(l) + l / k1 * v).powf(1.0 / l);
                hx = k1 * x.powf(l - 1.0);
            }
        } else {
            v -= a0 + a1;
            let lo = x0.max(2.0 / omega);
            x = -2.0 / omega * ((-omega / 2.0 * lo).exp() - omega / (2.0 * k2) * v).ln();
            hx = k2 * (-omega / 2.0 * x).exp();
        }
        let u = rng.open01() * hx;
        if u.ln() <= (l - 1.0) * x.ln() - omega / 2.0 * (x + 1.0 / x) {
            return x;
        }
    }
}
