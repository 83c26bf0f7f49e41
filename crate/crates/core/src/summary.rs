//! Posterior summaries: means, intervals, shrinkage factors.
//!
//! Naming: the per-cell total variance `V_ij + a_ij` is `s2` and the
//! within-area variance `(Σ_j 1/s2_ij)^-1` is `h2`, so that neither collides
//! with the auxiliary ξ or the grand mean η.

use serde::{Deserialize, Serialize};

use crate::gibbs::{DrawStore, Quantity};
use crate::model::{ChainState, ModelTag, SourcePanel, ThetaForm};
use crate::{Error, Result};

/// Conditional-mean decomposition of μ given the data and all variances.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageDecomposition {
    /// `A_i = λ²_i τ²₂`
    pub a: Vec<f64>,
    /// `s2_ij = V_ij + a_ij`, row-major
    pub s2: Vec<f64>,
    pub h2: Vec<f64>,
    /// `φ_i = A_i / (A_i + h2_i)`
    pub phi: Vec<f64>,
    /// 1/s2-weighted source mean of area i
    pub ybar: Vec<f64>,
    /// 1/(A_i + h2_i)-weighted mean of the `ybar`
    pub ybar_w: f64,
    /// `φ_i ybar_i + (1 - φ_i) ybar_w`
    pub conditional_mean: Vec<f64>,
}

pub fn decompose(state: &ChainState, panel: &SourcePanel, tag: ModelTag) -> ShrinkageDecomposition {
    let (n_i, n_j) = (panel.n_areas(), panel.n_sources());
    let mut a = Vec::with_capacity(n_i);
    let mut s2 = Vec::with_capacity(n_i * n_j);
    let mut h2 = Vec::with_capacity(n_i);
    let mut phi = Vec::with_capacity(n_i);
    let mut ybar = Vec::with_capacity(n_i);
    for i in 0..n_i {
        let mut prec = 0.0;
        let mut acc = 0.0;
        for j in 0..n_j {
            let s = if tag.has_theta() {
                panel.v(i, j) + state.theta_variance(tag, i, j)
            } else {
                panel.v(i, j)
            };
            s2.push(s);
            prec += 1.0 / s;
            acc += panel.y(i, j) / s;
        }
        let ai = state.mu_variance(tag, i);
        let hi = 1.0 / prec;
        a.push(ai);
        h2.push(hi);
        phi.push(ai / (ai + hi));
        ybar.push(acc / prec);
    }
    let w: Vec<f64> = (0..n_i).map(|i| 1.0 / (a[i] + h2[i])).collect();
    let wsum: f64 = w.iter().sum();
    let ybar_w = w.iter().zip(&ybar).map(|(wi, yi)| (wi / wsum) * yi).sum();
    let conditional_mean = (0..n_i).map(|i| phi[i] * ybar[i] + (1.0 - phi[i]) * ybar_w).collect();
    ShrinkageDecomposition {
        a,
        s2,
        h2,
        phi,
        ybar,
        ybar_w,
        conditional_mean,
    }
}

/// `φ_i` for every area at the current state.
pub fn shrinkage_factors(state: &ChainState, panel: &SourcePanel, tag: ModelTag) -> Vec<f64> {
    decompose(state, panel, tag).phi
}

/// `κ_ij = V_ij / (V_ij + λ²_ij τ²₁)`. Defined for the source-only and unit
/// forms, where λ²_i does not enter the θ level.
pub fn kappa_weights(state: &ChainState, panel: &SourcePanel, tag: ModelTag) -> Result<Vec<f64>> {
    match tag.theta_form() {
        ThetaForm::SourceOnly | ThetaForm::Unit => {}
        _ => return Err(Error::param(format!("shrinkage weights are not defined for {tag}"))),
    }
    let n_j = panel.n_sources();
    Ok((0..panel.n_areas() * n_j)
        .map(|k| {
            let (i, j) = (k / n_j, k % n_j);
            let v = panel.v(i, j);
            v / (v + state.theta_variance(tag, i, j))
        })
        .collect())
}

/// Posterior mean of κ_ij from stored variance draws.
pub fn kappa_posterior_mean(store: &DrawStore, panel: &SourcePanel) -> Result<Vec<f64>> {
    let tag = store.tag;
    match tag.theta_form() {
        ThetaForm::SourceOnly | ThetaForm::Unit => {}
        _ => return Err(Error::param(format!("shrinkage weights are not defined for {tag}"))),
    }
    let tau1 = store.trace(Quantity::Tau1Sq).ok_or(Error::NotMonitored("variances"))?;
    let lam = store.trace(Quantity::LambdaIj);
    if tag.theta_form() == ThetaForm::SourceOnly && lam.is_none() {
        return Err(Error::NotMonitored("variances"));
    }
    let n_j = panel.n_sources();
    let cells = panel.n_areas() * n_j;
    let mut sum = vec![0.0; cells];
    let mut count = 0usize;
    for c in 0..tau1.n_chains() {
        for k in 0..tau1.kept() {
            let t = tau1.draw(c, k)[0];
            for (cell, s) in sum.iter_mut().enumerate() {
                let l = lam.map_or(1.0, |tr| tr.draw(c, k)[cell]);
                let v = panel.v(cell / n_j, cell % n_j);
                *s += v / (v + l * t);
            }
            count += 1;
        }
    }
    Ok(sum.into_iter().map(|s| s / count as f64).collect())
}

/// Sample quantile by linear interpolation between order statistics
/// (position `(n-1) p` in the sorted sample).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than 2 values.
pub fn sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn summarize_draws(draws: &[f64], level: f64) -> Result<Summary> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::param(format!("credible level {level} is not in (0, 1)")));
    }
    if draws.is_empty() {
        return Err(Error::param("no draws to summarize"));
    }
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(Summary {
        mean: mean(draws),
        sd: sd(draws),
        lower: quantile_sorted(&s, alpha / 2.0),
        upper: quantile_sorted(&s, 1.0 - alpha / 2.0),
    })
}

/// Per-element mean, sd and equal-tailed interval over draws pooled across
/// chains.
pub fn summarize(store: &DrawStore, quantity: Quantity, level: f64) -> Result<Vec<Summary>> {
    let trace = store.trace(quantity).ok_or(Error::NotMonitored(quantity.name()))?;
    (0..trace.dim)
        .map(|idx| summarize_draws(&trace.pooled(idx), level))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(xs: &[f64]) -> Self {
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            min: s[0],
            q1: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q3: quantile_sorted(&s, 0.75),
            max: s[s.len() - 1],
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Five-number summary of the φ_i draws of every area.
pub fn phi_distribution(store: &DrawStore) -> Result<Vec<FiveNumber>> {
    let trace = store.trace(Quantity::Phi).ok_or(Error::NotMonitored("phi"))?;
    if trace.kept() == 0 {
        return Err(Error::param("no phi draws"));
    }
    Ok((0..trace.dim).map(|i| FiveNumber::of(&trace.pooled(i))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::RngStream;
    use crate::model::init_state;

    fn panel() -> SourcePanel {
        SourcePanel::unlabeled(3, 2, vec![0.2, 0.3, 0.1, 0.15, 0.4, 0.35], &[0.01, 0.01, 0.02, 0.005, 0.01, 0.03])
            .unwrap()
    }

    #[test]
    fn equal_cell_variances_give_plain_average() {
        let p = panel();
        let mut s = init_state(&p, ModelTag::M12, 0.0, &mut RngStream::new(0, 0)).unwrap();
        s.tau1_sq = 0.01;
        let d = decompose(&s, &p, ModelTag::M12);
        assert!((d.ybar[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn huge_across_area_variance_means_no_pooling() {
        let p = panel();
        let mut s = init_state(&p, ModelTag::M1a, 0.0, &mut RngStream::new(0, 0)).unwrap();
        s.tau2_sq = 1e12;
        let d = decompose(&s, &p, ModelTag::M1a);
        for i in 0..3 {
            assert!(d.phi[i] > 1.0 - 1e-9);
            assert!((d.conditional_mean[i] - d.ybar[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn kappa_examples() {
        let p = SourcePanel::unlabeled(2, 1, vec![0.2, 0.3], &[0.01, 0.01]).unwrap();
        let mut s = init_state(&p, ModelTag::M1a, 0.0, &mut RngStream::new(0, 0)).unwrap();
        s.tau1_sq = 0.01;
        assert_eq!(kappa_weights(&s, &p, ModelTag::M1a).unwrap()[0], 0.5);
        s.tau1_sq = 0.04;
        assert!((kappa_weights(&s, &p, ModelTag::M1a).unwrap()[0] - 0.2).abs() < 1e-15);
        s.tau1_sq = 1e-300;
        assert!(kappa_weights(&s, &p, ModelTag::M1a).unwrap()[0] > 1.0 - 1e-12);
        assert!(kappa_weights(&s, &p, ModelTag::M11a).is_err());
    }

    #[test]
    fn interval_conventions() {
        let s = summarize_draws(&[0.25; 10], 0.95).unwrap();
        assert_eq!((s.lower, s.upper, s.sd), (0.25, 0.25, 0.0));
        assert!(summarize_draws(&[1.0], 1.0).is_err());
        assert!(summarize_draws(&[1.0], 0.0).is_err());
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 10.0], 0.5), 2.5);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
    }
}
