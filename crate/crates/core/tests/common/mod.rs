//! Independent numerical references shared by the integration tests.
#![allow(dead_code)]

use glshrink_core::distributions::GigParams;
use glshrink_core::simgen::{generate, spec_table, synthetic_observed_v, VSource};
use glshrink_core::SourcePanel;

/// `K_nu(z) = ∫_0^∞ exp(-z cosh t) cosh(nu t) dt`, trapezoid rule.
pub fn bessel_k(nu: f64, z: f64) -> f64 {
    // Integrand is below e^-745 once z cosh t > 745 + |nu| t.
    let mut upper: f64 = 1.0;
    while z * upper.cosh() - nu.abs() * upper < 800.0 {
        upper += 0.5;
    }
    let n = 200_000;
    let h = upper / n as f64;
    let f = |t: f64| (-z * t.cosh() + nu.abs() * t).exp() * 0.5 * (1.0 + (-2.0 * nu.abs() * t).exp());
    let mut s = 0.5 * (f(0.0) + f(upper));
    for k in 1..n {
        s += f(k as f64 * h);
    }
    s * h
}

/// `E[X]` of a GIG with positive `chi` and `psi` from the Bessel ratio.
pub fn gig_mean_bessel(p: GigParams) -> f64 {
    let w = (p.chi * p.psi).sqrt();
    (p.chi / p.psi).sqrt() * bessel_k(p.order + 1.0, w) / bessel_k(p.order, w)
}

/// Tabulated CDF of a density known up to a constant, by quadrature in
/// `t = ln x` over `[lo, hi]`.
pub struct NumericCdf {
    t: Vec<f64>,
    cdf: Vec<f64>,
    pub mean: f64,
}

impl NumericCdf {
    pub fn from_log_kernel(log_kernel: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Self {
        let n = 400_000;
        let h = (hi - lo) / n as f64;
        let t: Vec<f64> = (0..=n).map(|k| lo + k as f64 * h).collect();
        // density of t = ln x is x f(x)
        let lw: Vec<f64> = t.iter().map(|&t| log_kernel(t.exp()) + t).collect();
        let top = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lw.iter().map(|l| (l - top).exp()).collect();
        let mut cdf = vec![0.0; t.len()];
        let mut m = 0.0;
        for k in 1..t.len() {
            cdf[k] = cdf[k - 1] + 0.5 * h * (w[k - 1] + w[k]);
            m += 0.5 * h * (w[k - 1] * t[k - 1].exp() + w[k] * t[k].exp());
        }
        let total = cdf[t.len() - 1];
        cdf.iter_mut().for_each(|c| *c /= total);
        Self { t, cdf, mean: m / total }
    }

    pub fn gig(p: GigParams) -> Self {
        Self::from_log_kernel(|x| p.log_kernel(x), -45.0, 12.0)
    }

    pub fn at(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return 0.0;
        }
        let t = x.ln();
        let (lo, hi) = (self.t[0], self.t[self.t.len() - 1]);
        if t <= lo {
            return 0.0;
        }
        if t >= hi {
            return 1.0;
        }
        let pos = (t - lo) / (hi - lo) * (self.t.len() - 1) as f64;
        let k = pos.floor() as usize;
        let f = pos - k as f64;
        self.cdf[k] + f * (self.cdf[k + 1] - self.cdf[k])
    }
}

/// Kolmogorov-Smirnov statistic of a sample against a CDF.
pub fn ks_statistic(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = cdf(x);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Large-sample critical value of the KS statistic.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// A 62-area, two-source synthetic panel from Case 1, row 1.
pub fn county_panel(seed: u64) -> SourcePanel {
    let spec = spec_table(1).unwrap()[0].clone();
    let v = VSource::Fixed(synthetic_observed_v(spec.n_areas, spec.n_sources, seed));
    generate(&spec, &v, seed, 0).unwrap().panel
}
