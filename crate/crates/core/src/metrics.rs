//! Deviation measures and discrepancy ratios.
//!
//! For estimates μ̂ and truths μ over I areas:
//!
//! ```text
//! ARB  = mean |μ̂_i - μ_i| / μ_i
//! ASRB = mean ((μ̂_i - μ_i) / μ_i)²
//! AAD  = mean |μ̂_i - μ_i|
//! ASD  = mean (μ̂_i - μ_i)²
//! ```
//!
//! Relative measures divide by the signed truth, as written.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::summary::quantile;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Measure {
    Arb,
    Asrb,
    Aad,
    Asd,
}

impl Measure {
    pub const ALL: [Measure; 4] = [Measure::Arb, Measure::Asrb, Measure::Aad, Measure::Asd];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Arb => "ARB",
            Measure::Asrb => "ASRB",
            Measure::Aad => "AAD",
            Measure::Asd => "ASD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitScore {
    pub arb: f64,
    pub asrb: f64,
    pub aad: f64,
    pub asd: f64,
}

impl FitScore {
    pub fn get(&self, m: Measure) -> f64 {
        match m {
            Measure::Arb => self.arb,
            Measure::Asrb => self.asrb,
            Measure::Aad => self.aad,
            Measure::Asd => self.asd,
        }
    }
}

pub fn score(estimates: &[f64], truths: &[f64]) -> Result<FitScore> {
    if estimates.len() != truths.len() || truths.is_empty() {
        return Err(Error::param(format!(
            "{} estimates for {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    if let Some(i) = truths.iter().position(|t| *t == 0.0) {
        return Err(Error::param(format!(
            "truth {} is zero; relative deviations are undefined",
            i + 1
        )));
    }
    let n = truths.len() as f64;
    let mut s = FitScore {
        arb: 0.0,
        asrb: 0.0,
        aad: 0.0,
        asd: 0.0,
    };
    for (e, t) in estimates.iter().zip(truths) {
        let d = e - t;
        s.arb += d.abs() / t;
        s.asrb += (d / t) * (d / t);
        s.aad += d.abs();
        s.asd += d * d;
    }
    s.arb /= n;
    s.asrb /= n;
    s.aad /= n;
    s.asd /= n;
    Ok(s)
}

/// Number of negative truths, reported next to the relative measures.
pub fn negative_truths(truths: &[f64]) -> usize {
    truths.iter().filter(|t| **t < 0.0).count()
}

/// Componentwise median over replicates (linear interpolation between order
/// statistics for even counts).
pub fn aggregate(scores: &[FitScore]) -> Result<FitScore> {
    if scores.is_empty() {
        return Err(Error::param("no replicate scores to aggregate"));
    }
    let med = |m: Measure| quantile(&scores.iter().map(|s| s.get(m)).collect::<Vec<_>>(), 0.5);
    Ok(FitScore {
        arb: med(Measure::Arb),
        asrb: med(Measure::Asrb),
        aad: med(Measure::Aad),
        asd: med(Measure::Asd),
    })
}

/// Min, first quartile, median, mean, third quartile, max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution6 {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

impl Distribution6 {
    pub fn of(xs: &[f64]) -> Self {
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            min: s[0],
            q1: crate::summary::quantile_sorted(&s, 0.25),
            median: crate::summary::quantile_sorted(&s, 0.5),
            mean: crate::summary::mean(&s),
            q3: crate::summary::quantile_sorted(&s, 0.75),
            max: s[s.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub numerator: String,
    pub denominator: String,
    pub measure: Measure,
    /// One ratio per specification, in input order.
    pub ratios: Vec<f64>,
    pub distribution: Distribution6,
}

/// Ratio of aggregated medians per specification, `model / base`.
pub fn discrepancy_ratio(
    numerator: &str,
    model: &[FitScore],
    denominator: &str,
    base: &[FitScore],
    measure: Measure,
) -> Result<RatioSummary> {
    if model.len() != base.len() || model.is_empty() {
        return Err(Error::param(format!(
            "{} model specifications against {} base specifications",
            model.len(),
            base.len()
        )));
    }
    let ratios = model
        .iter()
        .zip(base)
        .enumerate()
        .map(|(k, (m, b))| {
            let d = b.get(measure);
            if d == 0.0 {
                Err(Error::param(format!(
                    "base {} is zero for specification {}",
                    measure.name(),
                    k + 1
                )))
            } else {
                Ok(m.get(measure) / d)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RatioSummary {
        numerator: numerator.to_string(),
        denominator: denominator.to_string(),
        measure,
        distribution: Distribution6::of(&ratios),
        ratios,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCounts {
    /// Specifications won per model (ties count for every tied model).
    pub counts: BTreeMap<String, usize>,
    /// Specifications (0-based) with a tie at the minimum.
    pub tied: Vec<usize>,
}

/// For each specification the model(s) with the smallest ratio.
pub fn best_model_counts(ratios: &[(String, Vec<f64>)]) -> Result<BestCounts> {
    if ratios.len() < 2 {
        return Err(Error::param("best-model counts need at least 2 models"));
    }
    let n = ratios[0].1.len();
    if ratios.iter().any(|(_, r)| r.len() != n) {
        return Err(Error::param("models have different numbers of specifications"));
    }
    let mut counts: BTreeMap<String, usize> = ratios.iter().map(|(m, _)| (m.clone(), 0)).collect();
    let mut tied = Vec::new();
    for k in 0..n {
        let best = ratios.iter().map(|(_, r)| r[k]).fold(f64::INFINITY, f64::min);
        let winners: Vec<&String> = ratios.iter().filter(|(_, r)| r[k] == best).map(|(m, _)| m).collect();
        if winners.len() > 1 {
            tied.push(k);
        }
        for m in winners {
            *counts.get_mut(m).expect("model present") += 1;
        }
    }
    Ok(BestCounts { counts, tied })
}
