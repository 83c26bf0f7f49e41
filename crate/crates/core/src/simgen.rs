//! Synthetic panels for the simulation study.
//!
//! Data are drawn top-down: μ_i ~ N(η, γ²₂), θ_ij ~ N(μ_i, γ²₁), then
//! Y_ij ~ N(θ_ij, V_ij). The γ² come from one of the level models below.
//! Cases 1-4 combine outlier and mixture models at the two levels; Cases 5
//! and 6 fix the μ level and give the two sources different θ variances.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{std_normal, stream_key, RngStream};
use crate::model::SourcePanel;
use crate::{Error, Result};

/// Small scale of the mixture model.
pub const MIXTURE_TAU22: f64 = 0.05;
pub const DEFAULT_ETA: f64 = 0.25;
pub const DEFAULT_AREAS: usize = 62;

/// Stream domain for data generation.
const GEN_DOMAIN: u64 = 0x5349_4D47;

/// How the variance γ² of one level is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LevelSpec {
    /// γ² = δ τ₁₁², δ ~ Bernoulli(p)
    Outlier { p: f64, tau11: f64 },
    /// γ² = δ τ₂₁² + (1-δ) τ₂₂², δ ~ Bernoulli(p)
    Mixture { p: f64, tau21: f64, tau22: f64 },
    /// γ² = τ²
    Fixed { tau: f64 },
    /// θ level only: source 1 gets τ₁², every other source δ τ₂² with one
    /// δ ~ Bernoulli(p) per area.
    SourceSpecific { tau1: f64, p: f64, tau2: f64 },
}

impl LevelSpec {
    fn validate(&self) -> Result<()> {
        let (p, scales): (f64, Vec<f64>) = match *self {
            LevelSpec::Outlier { p, tau11 } => (p, vec![tau11]),
            LevelSpec::Mixture { p, tau21, tau22 } => (p, vec![tau21, tau22]),
            LevelSpec::Fixed { tau } => (0.0, vec![tau]),
            LevelSpec::SourceSpecific { tau1, p, tau2 } => (p, vec![tau1, tau2]),
        };
        if !(0.0..=1.0).contains(&p) || scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::param(format!("invalid level specification {self:?}")));
        }
        Ok(())
    }

    /// Marginal variance of one draw.
    pub fn variance(&self) -> f64 {
        match *self {
            LevelSpec::Outlier { p, tau11 } => p * tau11 * tau11,
            LevelSpec::Mixture { p, tau21, tau22 } => p * tau21 * tau21 + (1.0 - p) * tau22 * tau22,
            LevelSpec::Fixed { tau } => tau * tau,
            LevelSpec::SourceSpecific { .. } => f64::NAN,
        }
    }
}

/// Whether aberration indicators are drawn per unit or once per panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DeltaScope {
    #[default]
    Unit,
    Panel,
}

/// One row of a simulation specification table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub case_id: u8,
    /// 1-based row of the case's table.
    pub row: usize,
    pub theta_level: LevelSpec,
    pub mu_level: LevelSpec,
    pub eta: f64,
    pub n_areas: usize,
    pub n_sources: usize,
    pub delta_scope: DeltaScope,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.case_id) {
            return Err(Error::param(format!("unknown case {}", self.case_id)));
        }
        if self.n_areas < 2 || self.n_sources < 1 {
            return Err(Error::param("a simulated panel needs at least 2 areas and 1 source"));
        }
        if matches!(self.mu_level, LevelSpec::SourceSpecific { .. }) {
            return Err(Error::param("source-specific variances only apply to the theta level"));
        }
        self.theta_level.validate()?;
        self.mu_level.validate()
    }

    /// Table parameters in paper column order.
    pub fn parameters(&self) -> Vec<(&'static str, f64)> {
        match (self.mu_level, self.theta_level) {
            (LevelSpec::Fixed { tau }, LevelSpec::SourceSpecific { tau1, p, tau2 }) => {
                if self.case_id == 6 {
                    vec![("tau", tau), ("tau1", tau1), ("tau2", tau2)]
                } else {
                    vec![("tau", tau), ("tau1", tau1), ("p", p), ("tau2", tau2)]
                }
            }
            (mu, theta) => {
                let (pm, tm) = level_pair(mu);
                let (pt, tt) = level_pair(theta);
                vec![("p_mu", pm), ("p_theta", pt), ("tau_mu", tm), ("tau_theta", tt)]
            }
        }
    }
}

fn level_pair(l: LevelSpec) -> (f64, f64) {
    match l {
        LevelSpec::Outlier { p, tau11 } => (p, tau11),
        LevelSpec::Mixture { p, tau21, .. } => (p, tau21),
        LevelSpec::Fixed { tau } => (1.0, tau),
        LevelSpec::SourceSpecific { p, tau2, .. } => (p, tau2),
    }
}

/// Level models of Cases 1-4 from table values.
pub fn case_levels(case_id: u8, p_mu: f64, p_theta: f64, tau_mu: f64, tau_theta: f64) -> Result<(LevelSpec, LevelSpec)> {
    let outlier = |p, t| LevelSpec::Outlier { p, tau11: t };
    let mixture = |p, t| LevelSpec::Mixture {
        p,
        tau21: t,
        tau22: MIXTURE_TAU22,
    };
    let (mu, theta) = match case_id {
        1 => (outlier(p_mu, tau_mu), outlier(p_theta, tau_theta)),
        2 => (mixture(p_mu, tau_mu), outlier(p_theta, tau_theta)),
        3 => (mixture(p_mu, tau_mu), mixture(p_theta, tau_theta)),
        4 => (outlier(p_mu, tau_mu), mixture(p_theta, tau_theta)),
        _ => return Err(Error::param(format!("case {case_id} is not an outlier/mixture case"))),
    };
    Ok((mu, theta))
}

fn spec(case_id: u8, row: usize, mu: LevelSpec, theta: LevelSpec) -> SimSpec {
    SimSpec {
        case_id,
        row,
        theta_level: theta,
        mu_level: mu,
        eta: DEFAULT_ETA,
        n_areas: DEFAULT_AREAS,
        n_sources: 2,
        delta_scope: DeltaScope::Unit,
    }
}

/// The specification grid of a case, rows in table order.
pub fn spec_table(case_id: u8) -> Result<Vec<SimSpec>> {
    let mut rows: Vec<(f64, f64, f64, f64)> = Vec::new(); // p_mu, p_theta, tau_mu, tau_theta
    match case_id {
        1 => {
            let probs = [(0.1, 0.1), (0.2, 0.2), (0.4, 0.4), (0.1, 0.2), (0.2, 0.1)];
            let taus = [(0.025, 0.025), (0.05, 0.05), (0.1, 0.1), (0.2, 0.2), (0.05, 0.1), (0.1, 0.05)];
            for (pm, pt) in probs {
                for (tm, tt) in taus {
                    rows.push((pm, pt, tm, tt));
                }
            }
        }
        2 => {
            for pm in [0.1, 0.2] {
                for pt in [0.1, 0.2, 0.4] {
                    for tm in [0.1, 0.2] {
                        for tt in [0.05, 0.1, 0.2] {
                            rows.push((pm, pt, tm, tt));
                        }
                    }
                }
            }
        }
        3 => {
            let probs = [(0.1, 0.1), (0.2, 0.2), (0.1, 0.2), (0.2, 0.1)];
            let taus = [(0.1, 0.1), (0.2, 0.2), (0.4, 0.4), (0.2, 0.4), (0.4, 0.2)];
            for (pm, pt) in probs {
                for (tm, tt) in taus {
                    rows.push((pm, pt, tm, tt));
                }
            }
        }
        4 => {
            for pm in [0.1, 0.2] {
                for tm in [0.05, 0.1, 0.2] {
                    for pt in [0.1, 0.2] {
                        for tt in [0.1, 0.2, 0.4] {
                            rows.push((pm, pt, tm, tt));
                        }
                    }
                }
            }
        }
        5 => {
            let mut out = Vec::new();
            for tau1 in [0.005, 0.01] {
                for p in [0.1, 0.2, 0.4] {
                    for tau2 in [0.05, 0.1, 0.2] {
                        out.push(source_specific(5, out.len() + 1, 0.05, tau1, p, tau2));
                    }
                }
            }
            return Ok(out);
        }
        6 => {
            let mut out = Vec::new();
            for tau1 in [0.005, 0.01] {
                for tau2 in [0.01, 0.02, 0.05, 0.1, 0.2, 0.4] {
                    out.push(source_specific(6, out.len() + 1, 0.05, tau1, 1.0, tau2));
                }
            }
            return Ok(out);
        }
        _ => return Err(Error::param(format!("unknown case {case_id}"))),
    }
    rows.into_iter()
        .enumerate()
        .map(|(k, (pm, pt, tm, tt))| {
            let (mu, theta) = case_levels(case_id, pm, pt, tm, tt)?;
            Ok(spec(case_id, k + 1, mu, theta))
        })
        .collect()
}

fn source_specific(case_id: u8, row: usize, tau: f64, tau1: f64, p: f64, tau2: f64) -> SimSpec {
    spec(case_id, row, LevelSpec::Fixed { tau }, LevelSpec::SourceSpecific { tau1, p, tau2 })
}

/// One row of a specification file. Cases 1-4 use `p_mu, p_theta, tau_mu,
/// tau_theta`; Cases 5-6 use `tau, tau1, p, tau2` (`p` defaults to 1).
#[derive(Debug, Deserialize)]
struct SpecRecord {
    case: u8,
    row: usize,
    #[serde(default)]
    p_mu: Option<f64>,
    #[serde(default)]
    p_theta: Option<f64>,
    #[serde(default)]
    tau_mu: Option<f64>,
    #[serde(default)]
    tau_theta: Option<f64>,
    #[serde(default)]
    tau: Option<f64>,
    #[serde(default)]
    tau1: Option<f64>,
    #[serde(default)]
    p: Option<f64>,
    #[serde(default)]
    tau2: Option<f64>,
}

/// Reads a specification grid from a comma-separated file with a header.
pub fn load_spec_grid(path: &Path) -> Result<Vec<SimSpec>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for (k, rec) in reader.deserialize::<SpecRecord>().enumerate() {
        let line = k as u64 + 2;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let r = rec.map_err(|e| parse_err(e.to_string()))?;
        let need = |name: &str, v: Option<f64>| v.ok_or_else(|| parse_err(format!("missing column {name}")));
        let s = match r.case {
            1..=4 => {
                let (mu, theta) = case_levels(
                    r.case,
                    need("p_mu", r.p_mu)?,
                    need("p_theta", r.p_theta)?,
                    need("tau_mu", r.tau_mu)?,
                    need("tau_theta", r.tau_theta)?,
                )?;
                spec(r.case, r.row, mu, theta)
            }
            5 | 6 => source_specific(
                r.case,
                r.row,
                need("tau", r.tau)?,
                need("tau1", r.tau1)?,
                if r.case == 6 { 1.0 } else { need("p", r.p)? },
                need("tau2", r.tau2)?,
            ),
            c => return Err(parse_err(format!("unknown case {c}"))),
        };
        s.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(s);
    }
    Ok(out)
}

/// Where the sampling variances of a simulated panel come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VSource {
    /// A fixed I×J matrix, row-major, used for every replicate.
    Fixed(Vec<f64>),
    /// A fresh with-replacement resample from a pool for every replicate.
    Bootstrap(Vec<f64>),
}

/// Draws `n` variances log-uniformly on `[1e-5, 1e-2]`.
pub fn synthetic_v_pool(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, stream_key(&[GEN_DOMAIN, 0x504F_4F4C]));
    let (lo, hi) = (1e-5f64.ln(), 1e-2f64.ln());
    (0..n).map(|_| (lo + (hi - lo) * rng.open01()).exp()).collect()
}

/// An I×J variance matrix drawn from the synthetic pool, each area's
/// variances sorted in decreasing order so that source 1 is always the noisier
/// one.
pub fn synthetic_observed_v(n_areas: usize, n_sources: usize, seed: u64) -> Vec<f64> {
    let pool = synthetic_v_pool(n_areas * n_sources, seed);
    let mut out = Vec::with_capacity(pool.len());
    for row in pool.chunks(n_sources) {
        let mut r = row.to_vec();
        r.sort_by(|a, b| b.total_cmp(a));
        out.extend(r);
    }
    out
}

/// I×J i.i.d. draws with replacement from `pool` (any shape, flattened).
pub fn bootstrap_v(pool: &[f64], n_areas: usize, n_sources: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::Config("empty variance pool".into()));
    }
    Ok((0..n_areas * n_sources).map(|_| pool[rng.random_range(0..pool.len())]).collect())
}

/// A generated panel together with the values that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPanel {
    pub panel: SourcePanel,
    pub truth_mu: Vec<f64>,
    pub truth_theta: Vec<f64>,
    /// δ of each area at the μ level (false for the fixed model).
    pub mu_flags: Vec<bool>,
    /// δ of each cell at the θ level, row-major.
    pub theta_flags: Vec<bool>,
}

/// Random stream of replicate `replicate` of a specification.
pub fn replicate_stream(seed: u64, spec: &SimSpec, replicate: u64) -> RngStream {
    RngStream::new(seed, stream_key(&[GEN_DOMAIN, spec.case_id as u64, spec.row as u64, replicate]))
}

fn bernoulli(p: f64, rng: &mut RngStream) -> bool {
    rng.open01() < p
}

/// Generates replicate `replicate` of `spec`.
pub fn generate(spec: &SimSpec, v: &VSource, seed: u64, replicate: u64) -> Result<SimPanel> {
    spec.validate()?;
    let (n_i, n_j) = (spec.n_areas, spec.n_sources);
    let mut rng = replicate_stream(seed, spec, replicate);

    let v = match v {
        VSource::Fixed(m) => {
            if m.len() != n_i * n_j {
                return Err(Error::Config(format!(
                    "variance matrix has {} cells, the specification needs {}",
                    m.len(),
                    n_i * n_j
                )));
            }
            m.clone()
        }
        VSource::Bootstrap(pool) => bootstrap_v(pool, n_i, n_j, &mut rng)?,
    };

    let panel_scope = spec.delta_scope == DeltaScope::Panel;
    let panel_delta = |p: f64, rng: &mut RngStream| -> Box<dyn FnMut(&mut RngStream) -> bool> {
        if panel_scope {
            let d = bernoulli(p, rng);
            Box::new(move |_| d)
        } else {
            Box::new(move |r| bernoulli(p, r))
        }
    };

    let mut mu = Vec::with_capacity(n_i);
    let mut mu_flags = Vec::with_capacity(n_i);
    {
        let p = match spec.mu_level {
            LevelSpec::Outlier { p, .. } | LevelSpec::Mixture { p, .. } => p,
            _ => 0.0,
        };
        let mut delta = panel_delta(p, &mut rng);
        for _ in 0..n_i {
            let (var, flag) = match spec.mu_level {
                LevelSpec::Outlier { tau11, .. } => {
                    let d = delta(&mut rng);
                    (if d { tau11 * tau11 } else { 0.0 }, d)
                }
                LevelSpec::Mixture { tau21, tau22, .. } => {
                    let d = delta(&mut rng);
                    (if d { tau21 * tau21 } else { tau22 * tau22 }, d)
                }
                LevelSpec::Fixed { tau } => (tau * tau, false),
                LevelSpec::SourceSpecific { .. } => unreachable!("validated"),
            };
            mu.push(spec.eta + var.sqrt() * std_normal(&mut rng));
            mu_flags.push(flag);
        }
    }

    let mut theta = Vec::with_capacity(n_i * n_j);
    let mut theta_flags = Vec::with_capacity(n_i * n_j);
    {
        let p = match spec.theta_level {
            LevelSpec::Outlier { p, .. } | LevelSpec::Mixture { p, .. } | LevelSpec::SourceSpecific { p, .. } => p,
            LevelSpec::Fixed { .. } => 0.0,
        };
        let mut delta = panel_delta(p, &mut rng);
        for m in &mu {
            let area_delta = match spec.theta_level {
                LevelSpec::SourceSpecific { .. } => Some(delta(&mut rng)),
                _ => None,
            };
            for j in 0..n_j {
                let (var, flag) = match spec.theta_level {
                    LevelSpec::Outlier { tau11, .. } => {
                        let d = delta(&mut rng);
                        (if d { tau11 * tau11 } else { 0.0 }, d)
                    }
                    LevelSpec::Mixture { tau21, tau22, .. } => {
                        let d = delta(&mut rng);
                        (if d { tau21 * tau21 } else { tau22 * tau22 }, d)
                    }
                    LevelSpec::Fixed { tau } => (tau * tau, false),
                    LevelSpec::SourceSpecific { tau1, tau2, .. } => {
                        if j == 0 {
                            (tau1 * tau1, false)
                        } else {
                            let d = area_delta.unwrap_or(false);
                            (if d { tau2 * tau2 } else { 0.0 }, d)
                        }
                    }
                };
                theta.push(m + var.sqrt() * std_normal(&mut rng));
                theta_flags.push(flag);
            }
        }
    }

    let y: Vec<f64> = theta
        .iter()
        .zip(&v)
        .map(|(t, vk)| t + vk.sqrt() * std_normal(&mut rng))
        .collect();
    let areas = (1..=n_i).map(|i| format!("{i}")).collect();
    let sources = (1..=n_j).map(|j| format!("S{j}")).collect();
    let panel = SourcePanel::from_variances(areas, sources, y, &v)?;
    Ok(SimPanel {
        panel,
        truth_mu: mu,
        truth_theta: theta,
        mu_flags,
        theta_flags,
    })
}
