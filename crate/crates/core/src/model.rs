//! Data, model variants, and the latent state of a chain.
//!
//! The two-source model is
//!
//! ```text
//! Y_ij | θ_ij        ~ N(θ_ij, V_ij)            V_ij known
//! θ_ij | μ_i, ...    ~ N(μ_i, a_ij)             a_ij depends on the variant
//! μ_i  | η, ...      ~ N(η, λ²_i τ²₂)
//! η                  flat
//! ```
//!
//! with global-local priors on the variances. The single-source variant drops
//! the θ level: `Y_i ~ N(μ_i, V_i)`, `μ_i ~ N(η, λ²_i τ²)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{std_normal, RngStream};
use crate::{Error, Result};

/// Per-area, per-source point estimates and their known sampling variances.
///
/// Matrices are stored row-major, `I` areas by `J` sources. The standard
/// error matrix is authoritative; `v` is always `se * se` so that a panel
/// written as standard errors reads back bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePanel {
    areas: Vec<String>,
    sources: Vec<String>,
    y: Vec<f64>,
    se: Vec<f64>,
    v: Vec<f64>,
}

impl SourcePanel {
    /// Builds a panel from estimates and standard errors. Fails with a full
    /// validation report if any invariant is violated.
    pub fn from_standard_errors(
        areas: Vec<String>,
        sources: Vec<String>,
        y: Vec<f64>,
        se: Vec<f64>,
    ) -> Result<Self> {
        let v = se.iter().map(|s| s * s).collect();
        let panel = Self {
            areas,
            sources,
            y,
            se,
            v,
        };
        let report = validate_panel(&panel);
        if report.is_ok() {
            Ok(panel)
        } else {
            Err(Error::Validation(report))
        }
    }

    pub fn from_variances(
        areas: Vec<String>,
        sources: Vec<String>,
        y: Vec<f64>,
        v: &[f64],
    ) -> Result<Self> {
        let se = v.iter().map(|x| if *x > 0.0 { x.sqrt() } else { *x }).collect();
        Self::from_standard_errors(areas, sources, y, se)
    }

    /// Panel with generated labels `area1..`, `source1..`.
    pub fn unlabeled(n_areas: usize, n_sources: usize, y: Vec<f64>, v: &[f64]) -> Result<Self> {
        let areas = (1..=n_areas).map(|i| format!("area{i}")).collect();
        let sources = (1..=n_sources).map(|j| format!("source{j}")).collect();
        Self::from_variances(areas, sources, y, v)
    }

    #[inline]
    pub fn n_areas(&self) -> usize {
        self.areas.len()
    }

    #[inline]
    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn areas(&self) -> &[String] {
        &self.areas
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    #[inline]
    pub fn y(&self, i: usize, j: usize) -> f64 {
        self.y[i * self.sources.len() + j]
    }

    #[inline]
    pub fn v(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.sources.len() + j]
    }

    #[inline]
    pub fn se(&self, i: usize, j: usize) -> f64 {
        self.se[i * self.sources.len() + j]
    }

    pub fn y_values(&self) -> &[f64] {
        &self.y
    }

    pub fn v_values(&self) -> &[f64] {
        &self.v
    }

    /// The single-source panel made of column `j`.
    pub fn select_source(&self, j: usize) -> Result<Self> {
        if j >= self.n_sources() {
            return Err(Error::param(format!(
                "source index {j} out of range for {} sources",
                self.n_sources()
            )));
        }
        let y = (0..self.n_areas()).map(|i| self.y(i, j)).collect();
        let se = (0..self.n_areas()).map(|i| self.se(i, j)).collect();
        Self::from_standard_errors(self.areas.clone(), vec![self.sources[j].clone()], y, se)
    }

    pub fn source_index(&self, name: &str) -> Option<usize> {
        self.sources.iter().position(|s| s == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    TooFewAreas(usize),
    NoSources,
    ShapeMismatch { expected: usize, y: usize, se: usize },
    NonPositiveVariance { area: usize, source: usize, value: f64 },
    NonFiniteEstimate { area: usize, source: usize },
    DuplicateArea(String),
    DuplicateSource(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // coordinates are shown 1-based
        match self {
            Violation::TooFewAreas(n) => write!(f, "need at least 2 areas, got {n}"),
            Violation::NoSources => write!(f, "need at least 1 source"),
            Violation::ShapeMismatch { expected, y, se } => {
                write!(f, "expected {expected} cells, got {y} estimates and {se} standard errors")
            }
            Violation::NonPositiveVariance { area, source, value } => {
                write!(f, "V({},{}) = {value} is not positive", area + 1, source + 1)
            }
            Violation::NonFiniteEstimate { area, source } => {
                write!(f, "Y({},{}) is not finite", area + 1, source + 1)
            }
            Violation::DuplicateArea(a) => write!(f, "duplicate area id {a:?}"),
            Violation::DuplicateSource(s) => write!(f, "duplicate source id {s:?}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

pub fn validate_panel(panel: &SourcePanel) -> ValidationReport {
    let mut out = Vec::new();
    let (n_i, n_j) = (panel.areas.len(), panel.sources.len());
    if n_i < 2 {
        out.push(Violation::TooFewAreas(n_i));
    }
    if n_j < 1 {
        out.push(Violation::NoSources);
    }
    let mut seen = std::collections::HashSet::new();
    for a in &panel.areas {
        if !seen.insert(a) {
            out.push(Violation::DuplicateArea(a.clone()));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for s in &panel.sources {
        if !seen.insert(s) {
            out.push(Violation::DuplicateSource(s.clone()));
        }
    }
    let expected = n_i * n_j;
    if panel.y.len() != expected || panel.se.len() != expected {
        out.push(Violation::ShapeMismatch {
            expected,
            y: panel.y.len(),
            se: panel.se.len(),
        });
        return ValidationReport { violations: out };
    }
    for i in 0..n_i {
        for j in 0..n_j {
            let k = i * n_j + j;
            if !panel.y[k].is_finite() {
                out.push(Violation::NonFiniteEstimate { area: i, source: j });
            }
            let v = panel.v[k];
            if !(v > 0.0) || !v.is_finite() {
                out.push(Violation::NonPositiveVariance { area: i, source: j, value: v });
            }
        }
    }
    ValidationReport { violations: out }
}

/// Prior on the local variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LocalPrior {
    Horseshoe,
    Lasso,
    /// Local variances fixed at 1.
    Unit,
}

/// How the conditional variance `a_ij` of θ_ij is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ThetaForm {
    /// `λ²_ij λ²_i τ²₁`
    Product,
    /// `λ²_ij τ²₁`
    SourceOnly,
    /// `τ²₁`
    Unit,
    /// No θ level (single-source model).
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelTag {
    M11a,
    M11b,
    M1a,
    M1b,
    M12,
    OneSource,
}

impl ModelTag {
    pub const ALL: [ModelTag; 6] = [
        ModelTag::M11a,
        ModelTag::M11b,
        ModelTag::M1a,
        ModelTag::M1b,
        ModelTag::M12,
        ModelTag::OneSource,
    ];

    pub fn local_prior(self) -> LocalPrior {
        match self {
            ModelTag::M11a | ModelTag::M1a | ModelTag::OneSource => LocalPrior::Horseshoe,
            ModelTag::M11b | ModelTag::M1b => LocalPrior::Lasso,
            ModelTag::M12 => LocalPrior::Unit,
        }
    }

    pub fn theta_form(self) -> ThetaForm {
        match self {
            ModelTag::M11a | ModelTag::M11b => ThetaForm::Product,
            ModelTag::M1a | ModelTag::M1b => ThetaForm::SourceOnly,
            ModelTag::M12 => ThetaForm::Unit,
            ModelTag::OneSource => ThetaForm::Absent,
        }
    }

    pub fn has_theta(self) -> bool {
        self.theta_form() != ThetaForm::Absent
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelTag::M11a => "M11a",
            ModelTag::M11b => "M11b",
            ModelTag::M1a => "M1a",
            ModelTag::M1b => "M1b",
            ModelTag::M12 => "M12",
            ModelTag::OneSource => "one-source",
        }
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m11a" => Ok(ModelTag::M11a),
            "m11b" => Ok(ModelTag::M11b),
            "m1a" => Ok(ModelTag::M1a),
            "m1b" => Ok(ModelTag::M1b),
            "m12" => Ok(ModelTag::M12),
            "one-source" | "one_source" | "onesource" => Ok(ModelTag::OneSource),
            other => Err(Error::param(format!("unknown model {other:?}"))),
        }
    }
}

/// Full latent state of one Gibbs chain.
///
/// `xi_*` are the auxiliary variables of the inverse-gamma scale mixture
/// behind each horseshoe-distributed variance; they stay at 1 and are ignored
/// when the corresponding variance is not horseshoe-distributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub n_areas: usize,
    pub n_sources: usize,
    /// I×J, empty for the single-source model.
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
    pub eta: f64,
    /// I×J, empty for the single-source model.
    pub lambda_ij: Vec<f64>,
    pub lambda_i: Vec<f64>,
    pub tau1_sq: f64,
    /// τ²₂, or τ² in the single-source model.
    pub tau2_sq: f64,
    pub xi_ij: Vec<f64>,
    pub xi_i: Vec<f64>,
    pub xi_tau1: f64,
    pub xi_tau2: f64,
}

impl ChainState {
    /// `a_ij`, the conditional variance of θ_ij around μ_i.
    #[inline]
    pub fn theta_variance(&self, tag: ModelTag, i: usize, j: usize) -> f64 {
        let k = i * self.n_sources + j;
        let a = match tag.theta_form() {
            ThetaForm::Product => self.lambda_ij[k] * self.lambda_i[i] * self.tau1_sq,
            ThetaForm::SourceOnly => self.lambda_ij[k] * self.tau1_sq,
            ThetaForm::Unit => self.tau1_sq,
            ThetaForm::Absent => return f64::NAN,
        };
        crate::distributions::floor_variance(a)
    }

    /// `A_i = λ²_i τ²₂`, the across-area variance of μ_i (`τ²₂` under the
    /// unit prior).
    #[inline]
    pub fn mu_variance(&self, tag: ModelTag, i: usize) -> f64 {
        let local = if tag.local_prior() == LocalPrior::Unit { 1.0 } else { self.lambda_i[i] };
        crate::distributions::floor_variance(local * self.tau2_sq)
    }

    /// First non-finite or non-positive-variance coordinate, if any.
    pub fn find_invalid(&self) -> Option<String> {
        let fin = |name: &str, xs: &[f64]| {
            xs.iter()
                .position(|x| !x.is_finite())
                .map(|k| format!("{name}[{k}]"))
        };
        let pos = |name: &str, xs: &[f64]| {
            xs.iter()
                .position(|x| !(x.is_finite() && *x > 0.0))
                .map(|k| format!("{name}[{k}]"))
        };
        fin("theta", &self.theta)
            .or_else(|| fin("mu", &self.mu))
            .or_else(|| fin("eta", &[self.eta]))
            .or_else(|| pos("lambda_ij", &self.lambda_ij))
            .or_else(|| pos("lambda_i", &self.lambda_i))
            .or_else(|| pos("tau1_sq", &[self.tau1_sq]))
            .or_else(|| pos("tau2_sq", &[self.tau2_sq]))
            .or_else(|| pos("xi_ij", &self.xi_ij))
            .or_else(|| pos("xi_i", &self.xi_i))
            .or_else(|| pos("xi_tau", &[self.xi_tau1, self.xi_tau2]))
    }
}

/// Which quantities a run records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Monitor {
    pub mu: bool,
    pub theta: bool,
    pub phi: bool,
    pub variances: bool,
    pub eta: bool,
}

impl Default for Monitor {
    fn default() -> Self {
        Self {
            mu: true,
            theta: false,
            phi: true,
            variances: true,
            eta: true,
        }
    }
}

impl Monitor {
    pub fn mu_only() -> Self {
        Self {
            mu: true,
            theta: false,
            phi: false,
            variances: false,
            eta: false,
        }
    }

    pub fn all() -> Self {
        Self {
            mu: true,
            theta: true,
            phi: true,
            variances: true,
            eta: true,
        }
    }
}

/// How a sweep updates θ, μ and η.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scan {
    /// A Metropolis move on each λ²_i with μ_i and θ_i· integrated out, then
    /// one joint draw of (η, μ, θ) given the variances: η with μ and θ
    /// integrated out, then μ | η, then θ | μ.
    #[default]
    Blocked,
    /// θ, μ, η one at a time from their full conditionals.
    SingleSite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub n_iter: usize,
    pub n_burnin: usize,
    pub n_chains: usize,
    pub thin: usize,
    pub seed: u64,
    /// Standard deviation of the per-chain jitter applied to μ and η at start.
    pub overdispersion: f64,
    pub monitor: Monitor,
    #[serde(default)]
    pub scan: Scan,
}

impl SamplerSettings {
    /// Single long chain for point estimation: 18 000 sweeps, 3 000 burn-in.
    pub fn point_estimation(seed: u64) -> Self {
        Self {
            n_iter: 18_000,
            n_burnin: 3_000,
            n_chains: 1,
            thin: 1,
            seed,
            overdispersion: 0.0,
            monitor: Monitor::default(),
            scan: Scan::default(),
        }
    }

    /// Five chains of 7 000 sweeps with 2 000 burn-in, for split-R̂.
    pub fn diagnostics(seed: u64) -> Self {
        Self {
            n_iter: 7_000,
            n_burnin: 2_000,
            n_chains: 5,
            thin: 1,
            seed,
            overdispersion: 0.05,
            monitor: Monitor::default(),
            scan: Scan::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::param("n_iter must be positive"));
        }
        if self.n_burnin >= self.n_iter {
            return Err(Error::param(format!(
                "n_burnin ({}) must be below n_iter ({})",
                self.n_burnin, self.n_iter
            )));
        }
        if self.n_chains == 0 {
            return Err(Error::param("n_chains must be at least 1"));
        }
        if self.thin == 0 {
            return Err(Error::param("thin must be at least 1"));
        }
        if !(self.overdispersion >= 0.0) {
            return Err(Error::param("overdispersion must be nonnegative"));
        }
        Ok(())
    }

    pub fn kept_per_chain(&self) -> usize {
        (self.n_iter - self.n_burnin) / self.thin
    }
}

/// Data-anchored starting state.
///
/// θ starts at the data, μ_i at the precision-weighted source mean of area i,
/// η at the mean of μ, every variance and auxiliary at 1. A positive
/// `overdispersion` jitters μ and η by independent N(0, overdispersion²).
pub fn init_state(
    panel: &SourcePanel,
    tag: ModelTag,
    overdispersion: f64,
    rng: &mut RngStream,
) -> Result<ChainState> {
    let (n_i, n_j) = (panel.n_areas(), panel.n_sources());
    if tag == ModelTag::OneSource && n_j != 1 {
        return Err(Error::param(format!(
            "the single-source model needs a one-source panel, got {n_j} sources"
        )));
    }
    let mut mu: Vec<f64> = (0..n_i)
        .map(|i| {
            let (num, den) = (0..n_j).fold((0.0, 0.0), |(n, d), j| {
                let w = 1.0 / panel.v(i, j);
                (n + w * panel.y(i, j), d + w)
            });
            num / den
        })
        .collect();
    let mut eta = mu.iter().sum::<f64>() / n_i as f64;
    if overdispersion > 0.0 {
        for m in mu.iter_mut() {
            *m += overdispersion * std_normal(rng);
        }
        eta += overdispersion * std_normal(rng);
    }
    let cells = if tag.has_theta() { n_i * n_j } else { 0 };
    Ok(ChainState {
        n_areas: n_i,
        n_sources: n_j,
        theta: if tag.has_theta() {
            panel.y_values().to_vec()
        } else {
            Vec::new()
        },
        mu,
        eta,
        lambda_ij: vec![1.0; cells],
        lambda_i: vec![1.0; n_i],
        tau1_sq: 1.0,
        tau2_sq: 1.0,
        xi_ij: vec![1.0; cells],
        xi_i: vec![1.0; n_i],
        xi_tau1: 1.0,
        xi_tau2: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(n_i: usize, y: f64, v: f64) -> SourcePanel {
        SourcePanel::unlabeled(n_i, 2, vec![y; n_i * 2], &vec![v; n_i * 2]).unwrap()
    }

    #[test]
    fn well_formed_62_by_2_panel_validates() {
        let p = panel(62, 0.2, 1e-3);
        assert!(validate_panel(&p).is_ok());
        assert_eq!((p.n_areas(), p.n_sources()), (62, 2));
    }

    #[test]
    fn zero_variance_is_reported_with_coordinates() {
        let err = SourcePanel::unlabeled(2, 2, vec![0.1; 4], &[1e-3, 0.0, 1e-3, 1e-3]).unwrap_err();
        match err {
            Error::Validation(r) => {
                assert_eq!(
                    r.violations,
                    vec![Violation::NonPositiveVariance { area: 0, source: 1, value: 0.0 }]
                );
                assert!(r.to_string().contains("V(1,2)"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn single_area_is_rejected() {
        let err = SourcePanel::unlabeled(1, 2, vec![0.1; 2], &[1e-3; 2]).unwrap_err();
        match err {
            Error::Validation(r) => assert!(r.violations.contains(&Violation::TooFewAreas(1))),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn variant_dispatch_is_total() {
        for tag in ModelTag::ALL {
            let pair = (tag.local_prior(), tag.theta_form());
            let expected = match tag {
                ModelTag::M11a => (LocalPrior::Horseshoe, ThetaForm::Product),
                ModelTag::M11b => (LocalPrior::Lasso, ThetaForm::Product),
                ModelTag::M1a => (LocalPrior::Horseshoe, ThetaForm::SourceOnly),
                ModelTag::M1b => (LocalPrior::Lasso, ThetaForm::SourceOnly),
                ModelTag::M12 => (LocalPrior::Unit, ThetaForm::Unit),
                ModelTag::OneSource => (LocalPrior::Horseshoe, ThetaForm::Absent),
            };
            assert_eq!(pair, expected, "{tag}");
            assert_eq!(tag.name().parse::<ModelTag>().unwrap(), tag);
        }
    }

    #[test]
    fn constant_data_initializes_at_the_constant() {
        let p = panel(5, 0.25, 1e-3);
        let s = init_state(&p, ModelTag::M11a, 0.0, &mut RngStream::new(0, 0)).unwrap();
        assert!(s.mu.iter().all(|m| (m - 0.25).abs() < 1e-15));
        assert!((s.eta - 0.25).abs() < 1e-15);
        assert_eq!(s.theta, p.y_values());
    }

    #[test]
    fn equal_precision_sources_average() {
        let p = SourcePanel::unlabeled(2, 2, vec![0.2, 0.3, 0.1, 0.1], &[0.01; 4]).unwrap();
        let s = init_state(&p, ModelTag::M1a, 0.0, &mut RngStream::new(0, 0)).unwrap();
        assert!((s.mu[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn overdispersed_starts_differ_between_streams() {
        let p = panel(4, 0.25, 1e-3);
        let a = init_state(&p, ModelTag::M1a, 0.1, &mut RngStream::new(9, 0)).unwrap();
        let b = init_state(&p, ModelTag::M1a, 0.1, &mut RngStream::new(9, 1)).unwrap();
        assert_ne!(a.mu, b.mu);
    }

    #[test]
    fn chain_state_json_round_trip_is_exact() {
        let p = panel(3, 0.25, 1e-3);
        let mut s = init_state(&p, ModelTag::M11a, 0.3, &mut RngStream::new(1, 2)).unwrap();
        s.tau1_sq = 1.234_567_890_123_456_7e-7;
        s.lambda_ij[2] = std::f64::consts::PI * 1e200;
        let back: ChainState = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        for (a, b) in back.mu.iter().zip(&s.mu) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn settings_presets() {
        let p = SamplerSettings::point_estimation(1);
        assert_eq!((p.n_iter, p.n_burnin, p.n_chains), (18_000, 3_000, 1));
        let d = SamplerSettings::diagnostics(1);
        assert_eq!((d.n_iter, d.n_burnin, d.n_chains), (7_000, 2_000, 5));
        let mut bad = p.clone();
        bad.n_chains = 0;
        assert!(bad.validate().is_err());
        bad = p;
        bad.n_burnin = bad.n_iter;
        assert!(bad.validate().is_err());
    }
}
