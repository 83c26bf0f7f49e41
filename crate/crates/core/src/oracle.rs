//! Independent posterior computation for tiny panels.
//!
//! Nothing here uses the Gibbs conditionals. The joint density is written out
//! term by term from the model, with the horseshoe prior used directly as the
//! law of κ² (auxiliaries integrated out).
//!
//! The default Metropolis target is the marginal posterior of the variances:
//! θ, μ and η are integrated out in closed form (flat prior on η), and the
//! sampler walks on log-variances with the Jacobian included. Posterior means
//! of μ and θ are Rao-Blackwellized through a dense solve of the (μ, η)
//! precision system. A full-joint target over every coordinate is also
//! available for cross-checking on the smallest instances.

use nalgebra::{DMatrix, DVector};

use crate::diagnostics::batch_means_mcse;
use crate::distributions::{
    horseshoe_log_kernel, lasso_log_kernel, normal_logpdf, std_normal, InverseGammaParams, RngStream,
};
use crate::gibbs::{run_chains, DrawStore, Quantity};
use crate::model::{ChainState, LocalPrior, ModelTag, Monitor, SamplerSettings, SourcePanel, ThetaForm};
use crate::{Error, Result};

/// A panel small enough for brute-force posterior computation.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub name: &'static str,
    pub panel: SourcePanel,
    pub tag: ModelTag,
}

impl TinyInstance {
    /// Uses the first source when `tag` is the single-source model.
    pub fn new(name: &'static str, panel: &SourcePanel, tag: ModelTag) -> Result<Self> {
        let panel = if tag == ModelTag::OneSource {
            panel.select_source(0)?
        } else {
            panel.clone()
        };
        if panel.n_areas() > 4 || panel.n_sources() > 2 {
            return Err(Error::param("tiny instances have at most 4 areas and 2 sources"));
        }
        Ok(Self { name, panel, tag })
    }
}

/// The three fixed test panels.
pub fn battery_panels() -> Vec<(&'static str, SourcePanel)> {
    let smooth = SourcePanel::unlabeled(
        3,
        2,
        vec![0.22, 0.24, 0.27, 0.25, 0.31, 0.29],
        &[4e-4, 1e-4, 9e-4, 2e-4, 5e-4, 1.5e-4],
    );
    let aberrant_source = SourcePanel::unlabeled(
        4,
        2,
        vec![0.20, 0.21, 0.25, 0.26, 0.30, 0.45, 0.23, 0.22],
        &[6e-4, 1e-4, 8e-4, 2e-4, 5e-4, 1e-4, 7e-4, 1.5e-4],
    );
    let outlying_area = SourcePanel::unlabeled(
        4,
        2,
        vec![0.18, 0.25, 0.30, 0.22, 0.60, 0.55, 0.24, 0.28],
        &[2.5e-3, 1e-3, 3e-3, 8e-4, 2e-3, 1.2e-3, 2.2e-3, 9e-4],
    );
    vec![
        ("smooth", smooth.expect("fixed panel")),
        ("aberrant-source", aberrant_source.expect("fixed panel")),
        ("outlying-area", outlying_area.expect("fixed panel")),
    ]
}

/// Every variant on every battery panel.
pub fn battery() -> Vec<TinyInstance> {
    let mut out = Vec::new();
    for (name, panel) in battery_panels() {
        for tag in ModelTag::ALL {
            out.push(TinyInstance::new(name, &panel, tag).expect("battery instance"));
        }
    }
    out
}

fn local_log_prior(prior: LocalPrior, v: f64) -> f64 {
    match prior {
        LocalPrior::Horseshoe => horseshoe_log_kernel(v),
        LocalPrior::Lasso => lasso_log_kernel(v),
        LocalPrior::Unit => 0.0,
    }
}

/// Variance of θ_ij around μ_i, spelled out per variant.
fn cell_variance(state: &ChainState, tag: ModelTag, i: usize, j: usize) -> f64 {
    let k = i * state.n_sources + j;
    match tag.theta_form() {
        ThetaForm::Product => state.lambda_ij[k] * state.lambda_i[i] * state.tau1_sq,
        ThetaForm::SourceOnly => state.lambda_ij[k] * state.tau1_sq,
        ThetaForm::Unit => state.tau1_sq,
        ThetaForm::Absent => 0.0,
    }
}

fn area_variance(state: &ChainState, tag: ModelTag, i: usize) -> f64 {
    match tag.local_prior() {
        LocalPrior::Unit => state.tau2_sq,
        _ => state.lambda_i[i] * state.tau2_sq,
    }
}

fn variances_in_support(state: &ChainState, tag: ModelTag) -> bool {
    let pos = |x: &f64| *x > 0.0 && x.is_finite();
    let local_ok = tag.local_prior() == LocalPrior::Unit
        || (state.lambda_i.iter().all(pos) && (!tag.has_theta() || state.lambda_ij.iter().all(pos)));
    local_ok && pos(&state.tau2_sq) && (!tag.has_theta() || pos(&state.tau1_sq))
}

/// Log joint density of data and parameters, auxiliaries integrated out.
///
/// Normal terms are normalized; the variance priors are the unnormalized
/// horseshoe and lasso kernels; η has a flat prior. Local variances of the
/// fixed-local model are not read.
pub fn log_joint(state: &ChainState, panel: &SourcePanel, tag: ModelTag) -> f64 {
    if !variances_in_support(state, tag) {
        return f64::NEG_INFINITY;
    }
    let (n_i, n_j) = (panel.n_areas(), panel.n_sources());
    let mut lp = 0.0;
    for i in 0..n_i {
        if tag.has_theta() {
            for j in 0..n_j {
                let th = state.theta[i * n_j + j];
                lp += normal_logpdf(panel.y(i, j), th, panel.v(i, j));
                lp += normal_logpdf(th, state.mu[i], cell_variance(state, tag, i, j));
            }
        } else {
            lp += normal_logpdf(panel.y(i, 0), state.mu[i], panel.v(i, 0));
        }
        lp += normal_logpdf(state.mu[i], state.eta, area_variance(state, tag, i));
    }
    let prior = tag.local_prior();
    if prior != LocalPrior::Unit {
        if tag.has_theta() {
            lp += state.lambda_ij.iter().map(|v| local_log_prior(prior, *v)).sum::<f64>();
        }
        lp += state.lambda_i.iter().map(|v| local_log_prior(prior, *v)).sum::<f64>();
    }
    if tag.has_theta() {
        lp += horseshoe_log_kernel(state.tau1_sq);
    }
    lp + horseshoe_log_kernel(state.tau2_sq)
}

/// Log joint including the auxiliaries of every horseshoe variance, with
/// `υ | ξ ~ IG(1/2, 1/ξ)` and `ξ ~ IG(1/2, 1)` in place of the horseshoe
/// kernel.
pub fn log_joint_augmented(state: &ChainState, panel: &SourcePanel, tag: ModelTag) -> f64 {
    let base = log_joint(state, panel, tag);
    if !base.is_finite() {
        return base;
    }
    let pair = |v: f64, xi: f64| {
        if !(xi > 0.0) {
            return f64::NEG_INFINITY;
        }
        InverseGammaParams { shape: 0.5, rate: 1.0 / xi }.logpdf(v)
            + InverseGammaParams { shape: 0.5, rate: 1.0 }.logpdf(xi)
            - horseshoe_log_kernel(v)
    };
    let mut lp = base;
    if tag.local_prior() == LocalPrior::Horseshoe {
        if tag.has_theta() {
            for (v, xi) in state.lambda_ij.iter().zip(&state.xi_ij) {
                lp += pair(*v, *xi);
            }
        }
        for (v, xi) in state.lambda_i.iter().zip(&state.xi_i) {
            lp += pair(*v, *xi);
        }
    }
    if tag.has_theta() {
        lp += pair(state.tau1_sq, state.xi_tau1);
    }
    lp + pair(state.tau2_sq, state.xi_tau2)
}

/// Which variances are free in a variant, in packing order:
/// λ²_ij (row-major), λ²_i, τ²₁, τ²₂.
#[derive(Debug, Clone, Copy)]
struct Layout {
    tag: ModelTag,
    n_i: usize,
    n_j: usize,
    lij: bool,
    li: bool,
    t1: bool,
}

impl Layout {
    fn new(panel: &SourcePanel, tag: ModelTag) -> Self {
        let local = tag.local_prior() != LocalPrior::Unit;
        Self {
            tag,
            n_i: panel.n_areas(),
            n_j: panel.n_sources(),
            lij: local && tag.has_theta(),
            li: local,
            t1: tag.has_theta(),
        }
    }

    fn dim(&self) -> usize {
        self.lij as usize * self.n_i * self.n_j + self.li as usize * self.n_i + self.t1 as usize + 1
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.lij {
            for i in 0..self.n_i {
                for j in 0..self.n_j {
                    out.push(format!("lambda_ij[{},{}]", i + 1, j + 1));
                }
            }
        }
        if self.li {
            out.extend((0..self.n_i).map(|i| format!("lambda_i[{}]", i + 1)));
        }
        if self.t1 {
            out.push("tau1_sq".into());
        }
        out.push("tau2_sq".into());
        out
    }

    /// State holding the variances `exp(u)`; means and auxiliaries are
    /// placeholders.
    fn unpack(&self, u: &[f64]) -> ChainState {
        let cells = if self.tag.has_theta() { self.n_i * self.n_j } else { 0 };
        let mut s = ChainState {
            n_areas: self.n_i,
            n_sources: self.n_j,
            theta: vec![0.0; cells],
            mu: vec![0.0; self.n_i],
            eta: 0.0,
            lambda_ij: vec![1.0; cells],
            lambda_i: vec![1.0; self.n_i],
            tau1_sq: 1.0,
            tau2_sq: 1.0,
            xi_ij: vec![1.0; cells],
            xi_i: vec![1.0; self.n_i],
            xi_tau1: 1.0,
            xi_tau2: 1.0,
        };
        let mut k = 0;
        if self.lij {
            for x in s.lambda_ij.iter_mut() {
                *x = u[k].exp();
                k += 1;
            }
        }
        if self.li {
            for x in s.lambda_i.iter_mut() {
                *x = u[k].exp();
                k += 1;
            }
        }
        if self.t1 {
            s.tau1_sq = u[k].exp();
            k += 1;
        }
        s.tau2_sq = u[k].exp();
        s
    }
}

/// Total variance of each cell around μ_i once θ is integrated out.
fn total_cell_variances(state: &ChainState, panel: &SourcePanel, tag: ModelTag) -> Vec<f64> {
    let n_j = panel.n_sources();
    (0..panel.n_areas() * n_j)
        .map(|k| {
            let (i, j) = (k / n_j, k % n_j);
            panel.v(i, j) + cell_variance(state, tag, i, j)
        })
        .collect()
}

/// Log marginal likelihood `p(y | variances)` with θ, μ and η integrated out,
/// η under a flat prior. Computed from the dense covariance of y.
pub fn log_marginal_likelihood(state: &ChainState, panel: &SourcePanel, tag: ModelTag) -> f64 {
    let (n_i, n_j) = (panel.n_areas(), panel.n_sources());
    let n = n_i * n_j;
    let s2 = total_cell_variances(state, panel, tag);
    let mut sigma = DMatrix::<f64>::zeros(n, n);
    for i in 0..n_i {
        let a = area_variance(state, tag, i);
        for j in 0..n_j {
            for l in 0..n_j {
                sigma[(i * n_j + j, i * n_j + l)] = a;
            }
            sigma[(i * n_j + j, i * n_j + j)] += s2[i * n_j + j];
        }
    }
    let Some(chol) = sigma.cholesky() else {
        return f64::NEG_INFINITY;
    };
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let y = DVector::from_column_slice(panel.y_values());
    let ones = DVector::from_element(n, 1.0);
    let si_y = chol.solve(&y);
    let si_1 = chol.solve(&ones);
    let q11 = ones.dot(&si_1);
    let q1y = ones.dot(&si_y);
    let qyy = y.dot(&si_y);
    -0.5 * log_det - 0.5 * q11.ln() - 0.5 * (qyy - q1y * q1y / q11)
        - 0.5 * (n as f64 - 1.0) * (2.0 * std::f64::consts::PI).ln()
}

/// Posterior of (μ, η) given y and the variances, θ integrated out.
#[derive(Debug, Clone)]
pub struct MuEtaPosterior {
    /// μ_1..μ_I, η
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// Dense Gaussian solve of the (μ, η) precision system.
pub fn mu_eta_posterior(state: &ChainState, panel: &SourcePanel, tag: ModelTag) -> MuEtaPosterior {
    let (n_i, n_j) = (panel.n_areas(), panel.n_sources());
    let s2 = total_cell_variances(state, panel, tag);
    let mut p = DMatrix::<f64>::zeros(n_i + 1, n_i + 1);
    let mut b = DVector::<f64>::zeros(n_i + 1);
    for i in 0..n_i {
        let d = 1.0 / area_variance(state, tag, i);
        p[(i, i)] += d;
        p[(i, n_i)] -= d;
        p[(n_i, i)] -= d;
        p[(n_i, n_i)] += d;
        for j in 0..n_j {
            p[(i, i)] += 1.0 / s2[i * n_j + j];
            b[i] += panel.y(i, j) / s2[i * n_j + j];
        }
    }
    let chol = p.cholesky().expect("precision matrix is positive definite");
    MuEtaPosterior {
        mean: chol.solve(&b).iter().copied().collect(),
        cov: chol.inverse(),
    }
}

/// E(μ_i | y, variances) for every area.
///
/// Same dense precision system as [`mu_eta_posterior`], but assembled and
/// factored in double-double arithmetic: when some `λ²_i τ²₂` is many orders
/// of magnitude below the data variances the system is too ill-conditioned
/// for a plain f64 solve.
pub fn collapsed_conditional_mean(state: &ChainState, panel: &SourcePanel, tag: ModelTag) -> Vec<f64> {
    use dd::Dd;
    let (n_i, n_j) = (panel.n_areas(), panel.n_sources());
    let n = n_i + 1;
    let s2 = total_cell_variances(state, panel, tag);
    let mut p = vec![Dd::ZERO; n * n];
    let mut b = vec![Dd::ZERO; n];
    for i in 0..n_i {
        let d = Dd::ONE / Dd::from(area_variance(state, tag, i));
        p[i * n + i] = p[i * n + i] + d;
        p[i * n + n_i] = p[i * n + n_i] - d;
        p[n_i * n + i] = p[n_i * n + i] - d;
        p[n_i * n + n_i] = p[n_i * n + n_i] + d;
        for j in 0..n_j {
            let w = Dd::ONE / Dd::from(s2[i * n_j + j]);
            p[i * n + i] = p[i * n + i] + w;
            b[i] = b[i] + w * Dd::from(panel.y(i, j));
        }
    }
    // LDLᵀ, L unit lower triangular stored below the diagonal of `p`.
    let mut diag = vec![Dd::ZERO; n];
    for k in 0..n {
        let mut dk = p[k * n + k];
        for m in 0..k {
            dk = dk - p[k * n + m] * p[k * n + m] * diag[m];
        }
        diag[k] = dk;
        for r in k + 1..n {
            let mut v = p[r * n + k];
            for m in 0..k {
                v = v - p[r * n + m] * p[k * n + m] * diag[m];
            }
            p[r * n + k] = v / dk;
        }
    }
    let mut z = b;
    for r in 0..n {
        for m in 0..r {
            z[r] = z[r] - p[r * n + m] * z[m];
        }
    }
    for r in 0..n {
        z[r] = z[r] / diag[r];
    }
    for r in (0..n).rev() {
        for m in r + 1..n {
            z[r] = z[r] - p[m * n + r] * z[m];
        }
    }
    z[..n_i].iter().map(|x| x.to_f64()).collect()
}

/// Double-double arithmetic (about 32 significant digits).
mod dd {
    use std::ops::{Add, Div, Mul, Sub};

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Dd {
        hi: f64,
        lo: f64,
    }

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    fn quick_two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        Dd { hi: s, lo: b - (s - a) }
    }

    fn two_prod(a: f64, b: f64) -> (f64, f64) {
        let p = a * b;
        (p, a.mul_add(b, -p))
    }

    impl Dd {
        pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
        pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

        pub fn to_f64(self) -> f64 {
            self.hi + self.lo
        }

        fn neg(self) -> Dd {
            Dd { hi: -self.hi, lo: -self.lo }
        }
    }

    impl From<f64> for Dd {
        fn from(x: f64) -> Self {
            Dd { hi: x, lo: 0.0 }
        }
    }

    impl Add for Dd {
        type Output = Dd;
        fn add(self, y: Dd) -> Dd {
            let (s, e) = two_sum(self.hi, y.hi);
            let (t, f) = two_sum(self.lo, y.lo);
            let r = quick_two_sum(s, e + t);
            quick_two_sum(r.hi, r.lo + f)
        }
    }

    impl Sub for Dd {
        type Output = Dd;
        fn sub(self, y: Dd) -> Dd {
            self + y.neg()
        }
    }

    impl Mul for Dd {
        type Output = Dd;
        fn mul(self, y: Dd) -> Dd {
            let (p, e) = two_prod(self.hi, y.hi);
            quick_two_sum(p, e + (self.hi * y.lo + self.lo * y.hi))
        }
    }

    impl Div for Dd {
        type Output = Dd;
        fn div(self, y: Dd) -> Dd {
            let q1 = self.hi / y.hi;
            let r = self - y * Dd::from(q1);
            let q2 = r.hi / y.hi;
            let r = r - y * Dd::from(q2);
            let q3 = r.hi / y.hi;
            quick_two_sum(q1, q2) + Dd::from(q3)
        }
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn recovers_digits_lost_in_f64() {
            // (1 + 2^-60) - 1 vanishes in f64
            let tiny = 2f64.powi(-60);
            let x = (Dd::ONE + Dd::from(tiny)) - Dd::ONE;
            assert_eq!(x.to_f64(), tiny);
            let third = Dd::ONE / Dd::from(3.0);
            let back = third * Dd::from(3.0) - Dd::ONE;
            assert!(back.to_f64().abs() < 1e-30);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleTarget {
    /// Variances only; means integrated out.
    Collapsed,
    /// Every coordinate of the model.
    FullJoint,
}

#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub target: OracleTarget,
    pub tune_rounds: usize,
    pub tune_len: usize,
    pub burnin: usize,
    pub n_iter: usize,
    /// Keep every k-th variance vector of the main run (collapsed target).
    pub keep_every: Option<usize>,
    /// Independent runs, each with its own tuning; their spread enters the
    /// reported MCSE.
    pub replicates: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            target: OracleTarget::Collapsed,
            tune_rounds: 40,
            tune_len: 2_000,
            burnin: 20_000,
            n_iter: 400_000,
            keep_every: None,
            replicates: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSummary {
    pub mu_mean: Vec<f64>,
    pub mu_mcse: Vec<f64>,
    /// Posterior second moment of μ_i.
    pub mu_second: Vec<f64>,
    pub theta_mean: Vec<f64>,
    pub theta_mcse: Vec<f64>,
    pub log_variance_names: Vec<String>,
    pub log_variance_mean: Vec<f64>,
    pub acceptance: f64,
    /// Variance vectors (log scale) kept during the main run.
    pub kept_log_variances: Vec<Vec<f64>>,
}

struct Target<'a> {
    panel: &'a SourcePanel,
    tag: ModelTag,
    layout: Layout,
    kind: OracleTarget,
}

impl Target<'_> {
    fn n_means(&self) -> usize {
        match self.kind {
            OracleTarget::Collapsed => 0,
            OracleTarget::FullJoint => {
                let cells = if self.tag.has_theta() { self.layout.n_i * self.layout.n_j } else { 0 };
                cells + self.layout.n_i + 1
            }
        }
    }

    fn dim(&self) -> usize {
        self.n_means() + self.layout.dim()
    }

    fn state(&self, x: &[f64]) -> ChainState {
        let m = self.n_means();
        let mut s = self.layout.unpack(&x[m..]);
        if self.kind == OracleTarget::FullJoint {
            let cells = s.theta.len();
            s.theta.copy_from_slice(&x[..cells]);
            s.mu.copy_from_slice(&x[cells..cells + self.layout.n_i]);
            s.eta = x[cells + self.layout.n_i];
        }
        s
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let m = self.n_means();
        let jacobian: f64 = x[m..].iter().sum();
        let s = self.state(x);
        let prior_and_lik = match self.kind {
            OracleTarget::Collapsed => {
                let mut lp = log_marginal_likelihood(&s, self.panel, self.tag);
                let prior = self.tag.local_prior();
                if self.layout.lij {
                    lp += s.lambda_ij.iter().map(|v| local_log_prior(prior, *v)).sum::<f64>();
                }
                if self.layout.li {
                    lp += s.lambda_i.iter().map(|v| local_log_prior(prior, *v)).sum::<f64>();
                }
                if self.layout.t1 {
                    lp += horseshoe_log_kernel(s.tau1_sq);
                }
                lp + horseshoe_log_kernel(s.tau2_sq)
            }
            OracleTarget::FullJoint => log_joint(&s, self.panel, self.tag),
        };
        let lp = prior_and_lik + jacobian;
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }

    /// Per-iteration observables: μ then θ (conditional means for the
    /// collapsed target, raw values for the full joint), then μ².
    fn observe(&self, x: &[f64]) -> Vec<f64> {
        let s = self.state(x);
        let (n_i, n_j) = (self.layout.n_i, self.layout.n_j);
        let mut out = Vec::with_capacity(2 * n_i + n_i * n_j);
        match self.kind {
            OracleTarget::Collapsed => {
                let post = mu_eta_posterior(&s, self.panel, self.tag);
                out.extend_from_slice(&post.mean[..n_i]);
                if self.tag.has_theta() {
                    for i in 0..n_i {
                        for j in 0..n_j {
                            let (y, v) = (self.panel.y(i, j), self.panel.v(i, j));
                            let a = cell_variance(&s, self.tag, i, j);
                            out.push((y * a + post.mean[i] * v) / (a + v));
                        }
                    }
                }
                out.extend((0..n_i).map(|i| post.cov[(i, i)] + post.mean[i] * post.mean[i]));
            }
            OracleTarget::FullJoint => {
                out.extend_from_slice(&s.mu);
                out.extend_from_slice(&s.theta);
                out.extend(s.mu.iter().map(|m| m * m));
            }
        }
        out
    }

    fn start(&self) -> Vec<f64> {
        let p = self.panel;
        let (n_i, n_j) = (p.n_areas(), p.n_sources());
        let area_mean: Vec<f64> =
            (0..n_i).map(|i| (0..n_j).map(|j| p.y(i, j)).sum::<f64>() / n_j as f64).collect();
        let grand = area_mean.iter().sum::<f64>() / n_i as f64;
        let between = area_mean.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (n_i - 1) as f64;
        let within = (0..n_i * n_j)
            .map(|k| (p.y(k / n_j, k % n_j) - area_mean[k / n_j]).powi(2))
            .sum::<f64>()
            / (n_i * n_j) as f64;
        let mut x = Vec::with_capacity(self.dim());
        if self.kind == OracleTarget::FullJoint {
            if self.tag.has_theta() {
                x.extend_from_slice(p.y_values());
            }
            x.extend_from_slice(&area_mean);
            x.push(grand);
        }
        x.extend(std::iter::repeat(0.0).take(self.layout.lij as usize * n_i * n_j + self.layout.li as usize * n_i));
        if self.layout.t1 {
            x.push(within.max(1e-5).ln());
        }
        x.push(between.max(1e-4).ln());
        x
    }
}

/// Random-walk Metropolis with multivariate normal proposals.
struct Walker {
    x: Vec<f64>,
    lp: f64,
    chol: DMatrix<f64>,
    scale: f64,
}

impl Walker {
    fn step(&mut self, target: &Target<'_>, rng: &mut RngStream) -> bool {
        let d = self.x.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| std_normal(rng)));
        let dx = &self.chol * z;
        let prop: Vec<f64> = self.x.iter().zip(dx.iter()).map(|(a, b)| a + self.scale * b).collect();
        let lp = target.log_density(&prop);
        let accept = rng.open01().ln() < lp - self.lp;
        if accept {
            self.x = prop;
            self.lp = lp;
        }
        accept
    }

    fn run(&mut self, target: &Target<'_>, n: usize, rng: &mut RngStream, trace: &mut Vec<Vec<f64>>) -> f64 {
        let mut acc = 0usize;
        for _ in 0..n {
            acc += self.step(target, rng) as usize;
            trace.push(self.x.clone());
        }
        acc as f64 / n as f64
    }
}

fn empirical_cholesky(draws: &[Vec<f64>], fallback: &DMatrix<f64>) -> DMatrix<f64> {
    let d = draws[0].len();
    let n = draws.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| draws.iter().map(|x| x[k]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for x in draws {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (x[a] - mean[a]) * (x[b] - mean[b]) / (n - 1.0);
            }
        }
    }
    for a in 0..d {
        cov[(a, a)] += 1e-10;
    }
    cov.cholesky().map(|c| c.l()).unwrap_or_else(|| fallback.clone())
}

/// Posterior summaries by random-walk Metropolis.
///
/// Tuning runs in two stages: the first half of the rounds adapts a scalar
/// step on a diagonal proposal, the second half uses the empirical
/// covariance of the first stage. The scale is then frozen for burn-in and
/// the main run. Fails if the main-run acceptance rate is outside
/// `[0.1, 0.5]`.
/// Runs `config.replicates` independent samplers one after another on `rng`
/// and pools them. Means are averaged; each MCSE is the larger of the pooled
/// batch-means value and the between-run standard error, so a run that
/// lingers in a hard-to-reach region cannot hide behind its own batches.
pub fn metropolis_posterior(instance: &TinyInstance, config: &OracleConfig, rng: &mut RngStream) -> Result<OracleSummary> {
    if config.replicates == 0 {
        return Err(Error::param("oracle replicates must be positive"));
    }
    let runs = (0..config.replicates)
        .map(|_| metropolis_run(instance, config, rng))
        .collect::<Result<Vec<_>>>()?;
    let r = runs.len() as f64;
    let avg = |f: &dyn Fn(&OracleSummary) -> &Vec<f64>| -> Vec<f64> {
        (0..f(&runs[0]).len())
            .map(|k| runs.iter().map(|o| f(o)[k]).sum::<f64>() / r)
            .collect()
    };
    let mcse = |mean: &dyn Fn(&OracleSummary) -> &Vec<f64>, se: &dyn Fn(&OracleSummary) -> &Vec<f64>| -> Vec<f64> {
        (0..mean(&runs[0]).len())
            .map(|k| {
                let within = runs.iter().map(|o| se(o)[k].powi(2)).sum::<f64>().sqrt() / r;
                if runs.len() < 2 {
                    return within;
                }
                let m = runs.iter().map(|o| mean(o)[k]).sum::<f64>() / r;
                let var = runs.iter().map(|o| (mean(o)[k] - m).powi(2)).sum::<f64>() / (r - 1.0);
                within.max((var / r).sqrt())
            })
            .collect()
    };
    Ok(OracleSummary {
        mu_mean: avg(&|o| &o.mu_mean),
        mu_mcse: mcse(&|o| &o.mu_mean, &|o| &o.mu_mcse),
        mu_second: avg(&|o| &o.mu_second),
        theta_mean: avg(&|o| &o.theta_mean),
        theta_mcse: mcse(&|o| &o.theta_mean, &|o| &o.theta_mcse),
        log_variance_names: runs[0].log_variance_names.clone(),
        log_variance_mean: avg(&|o| &o.log_variance_mean),
        acceptance: runs.iter().map(|o| o.acceptance).sum::<f64>() / r,
        kept_log_variances: runs.iter().flat_map(|o| o.kept_log_variances.iter().cloned()).collect(),
    })
}

fn metropolis_run(instance: &TinyInstance, config: &OracleConfig, rng: &mut RngStream) -> Result<OracleSummary> {
    let target = Target {
        panel: &instance.panel,
        tag: instance.tag,
        layout: Layout::new(&instance.panel, instance.tag),
        kind: config.target,
    };
    let d = target.dim();
    let x = target.start();
    let lp = target.log_density(&x);
    if !lp.is_finite() {
        return Err(Error::Oracle(format!("start point outside support for {}", instance.tag)));
    }
    let mut w = Walker {
        x,
        lp,
        chol: DMatrix::identity(d, d) * 0.1,
        scale: 2.38 / (d as f64).sqrt(),
    };

    let half = (config.tune_rounds / 2).max(1);
    let mut stage1 = Vec::new();
    for round in 0..config.tune_rounds {
        if round == half {
            let tail = &stage1[stage1.len() / 2..];
            w.chol = empirical_cholesky(tail, &w.chol);
            w.scale = 2.38 / (d as f64).sqrt();
        }
        let mut buf = Vec::with_capacity(config.tune_len);
        let acc = w.run(&target, config.tune_len, rng, &mut buf);
        w.scale *= (acc / 0.25).clamp(0.5, 2.0);
        if round < half {
            stage1.extend(buf);
        }
    }

    for _ in 0..config.burnin {
        w.step(&target, rng);
    }

    let mut obs_trace: Vec<Vec<f64>> = Vec::with_capacity(config.n_iter);
    let mut sum_u = vec![0.0; target.layout.dim()];
    let mut kept = Vec::new();
    let mut current = target.observe(&w.x);
    let mut acc = 0usize;
    for t in 0..config.n_iter {
        if w.step(&target, rng) {
            acc += 1;
            current = target.observe(&w.x);
        }
        obs_trace.push(current.clone());
        let m = target.n_means();
        for (s, u) in sum_u.iter_mut().zip(&w.x[m..]) {
            *s += u;
        }
        if let Some(k) = config.keep_every {
            if t % k == 0 {
                kept.push(w.x[m..].to_vec());
            }
        }
    }
    let acceptance = acc as f64 / config.n_iter as f64;
    if !(0.1..=0.5).contains(&acceptance) {
        return Err(Error::Oracle(format!(
            "{} on {}: acceptance rate {acceptance:.3} outside [0.1, 0.5] after tuning",
            instance.tag, instance.name
        )));
    }

    let n_i = instance.panel.n_areas();
    let n_theta = if instance.tag.has_theta() { n_i * instance.panel.n_sources() } else { 0 };
    let column = |k: usize| -> Vec<f64> { obs_trace.iter().map(|o| o[k]).collect() };
    let col_mean = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
    let mut summary = OracleSummary {
        mu_mean: Vec::new(),
        mu_mcse: Vec::new(),
        mu_second: Vec::new(),
        theta_mean: Vec::new(),
        theta_mcse: Vec::new(),
        log_variance_names: target.layout.names(),
        log_variance_mean: sum_u.iter().map(|s| s / config.n_iter as f64).collect(),
        acceptance,
        kept_log_variances: kept,
    };
    for k in 0..n_i {
        let c = column(k);
        summary.mu_mean.push(col_mean(&c));
        summary.mu_mcse.push(batch_means_mcse(&c));
        summary.mu_second.push(col_mean(&column(n_i + n_theta + k)));
    }
    for k in 0..n_theta {
        let c = column(n_i + k);
        summary.theta_mean.push(col_mean(&c));
        summary.theta_mcse.push(batch_means_mcse(&c));
    }
    Ok(summary)
}

/// Approximately exact posterior states: variance vectors from a collapsed
/// oracle run, then μ, η, θ and the auxiliaries drawn exactly from their
/// Gaussian and inverse-gamma conditionals.
pub fn posterior_states(
    instance: &TinyInstance,
    summary: &OracleSummary,
    rng: &mut RngStream,
) -> Vec<ChainState> {
    let layout = Layout::new(&instance.panel, instance.tag);
    let panel = &instance.panel;
    let tag = instance.tag;
    let (n_i, n_j) = (panel.n_areas(), panel.n_sources());
    summary
        .kept_log_variances
        .iter()
        .map(|u| {
            let mut s = layout.unpack(u);
            let post = mu_eta_posterior(&s, panel, tag);
            let l = post.cov.clone().cholesky().expect("posterior covariance").l();
            let z = DVector::from_iterator(n_i + 1, (0..=n_i).map(|_| std_normal(rng)));
            let draw = DVector::from_column_slice(&post.mean) + l * z;
            s.mu.copy_from_slice(&draw.as_slice()[..n_i]);
            s.eta = draw[n_i];
            if tag.has_theta() {
                for i in 0..n_i {
                    for j in 0..n_j {
                        let (y, v) = (panel.y(i, j), panel.v(i, j));
                        let a = cell_variance(&s, tag, i, j);
                        let mean = (y * a + s.mu[i] * v) / (a + v);
                        s.theta[i * n_j + j] = mean + (a * v / (a + v)).sqrt() * std_normal(rng);
                    }
                }
            }
            let aux = |v: f64, rng: &mut RngStream| InverseGammaParams { shape: 1.0, rate: 1.0 + 1.0 / v }.sample(rng);
            if tag.local_prior() == LocalPrior::Horseshoe {
                for k in 0..s.lambda_ij.len() {
                    s.xi_ij[k] = aux(s.lambda_ij[k], rng);
                }
                for k in 0..n_i {
                    s.xi_i[k] = aux(s.lambda_i[k], rng);
                }
            }
            if tag.has_theta() {
                s.xi_tau1 = aux(s.tau1_sq, rng);
            }
            s.xi_tau2 = aux(s.tau2_sq, rng);
            s
        })
        .collect()
}

/// Posterior mean and MCSE of every μ_i from a multi-chain Gibbs run.
#[derive(Debug, Clone)]
pub struct GibbsMuSummary {
    pub mean: Vec<f64>,
    pub mcse: Vec<f64>,
}

pub fn gibbs_mu_summary(store: &DrawStore) -> Result<GibbsMuSummary> {
    let trace = store.trace(Quantity::Mu).ok_or(Error::NotMonitored("mu"))?;
    let mut out = GibbsMuSummary {
        mean: Vec::new(),
        mcse: Vec::new(),
    };
    for i in 0..trace.dim {
        let chains = trace.all_series(i);
        let pooled: Vec<f64> = chains.concat();
        out.mean.push(pooled.iter().sum::<f64>() / pooled.len() as f64);
        out.mcse.push(crate::diagnostics::pooled_mcse(&chains));
    }
    Ok(out)
}

/// One μ comparison between Gibbs and the oracle.
#[derive(Debug, Clone)]
pub struct Agreement {
    pub area: usize,
    pub gibbs: f64,
    pub oracle: f64,
    pub combined_mcse: f64,
}

impl Agreement {
    /// |difference| in units of the combined MCSE.
    pub fn z(&self) -> f64 {
        (self.gibbs - self.oracle).abs() / self.combined_mcse
    }
}

/// Runs `chains` Gibbs chains of `draws` kept draws (after `burnin`) and the
/// oracle on one instance, returning one comparison per area.
pub fn compare_with_gibbs(
    instance: &TinyInstance,
    chains: usize,
    draws: usize,
    burnin: usize,
    seed: u64,
    oracle: &OracleSummary,
) -> Result<Vec<Agreement>> {
    let settings = SamplerSettings {
        n_iter: burnin + draws,
        n_burnin: burnin,
        n_chains: chains,
        thin: 1,
        seed,
        overdispersion: 0.05,
        monitor: Monitor::mu_only(),
        scan: Default::default(),
    };
    let store = run_chains(&instance.panel, instance.tag, &settings)?;
    let g = gibbs_mu_summary(&store)?;
    Ok((0..g.mean.len())
        .map(|i| Agreement {
            area: i,
            gibbs: g.mean[i],
            oracle: oracle.mu_mean[i],
            combined_mcse: (g.mcse[i].powi(2) + oracle.mu_mcse[i].powi(2)).sqrt(),
        })
        .collect())
}
