//! Convergence diagnostics.

use serde::{Deserialize, Serialize};

use crate::gibbs::{DrawStore, Quantity};
use crate::{Error, Result};

pub const DEFAULT_RHAT_THRESHOLD: f64 = 1.05;

/// Split-R̂ as in Gelman et al., Bayesian Data Analysis (3rd ed.), without
/// rank normalization.
///
/// Each chain is cut into halves (dropping its last draw when the length is
/// odd) and
///
/// ```text
/// R̂ = sqrt( ((n-1)/n W + B/n) / W )
/// ```
///
/// over the 2m half-chains of length n. Constant input gives 1 when every
/// half-chain has the same value and `+∞` when only `W` vanishes.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::param("split-R̂ needs at least 2 chains"));
    }
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    if len < 4 {
        return Err(Error::param(format!("split-R̂ needs at least 4 draws per chain, got {len}")));
    }
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::param("chains have different lengths"));
    }
    let n = len / 2;
    let halves: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..n], &c[n..2 * n]]).collect();
    let m = halves.len() as f64;
    let nf = n as f64;

    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;

    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok((var_plus / w).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhatEntry {
    pub parameter: String,
    pub rhat: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhatReport {
    pub threshold: f64,
    pub entries: Vec<RhatEntry>,
}

impl RhatReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().map(|e| e.rhat).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn push(&mut self, parameter: String, chains: &[Vec<f64>]) -> Result<()> {
        let rhat = split_rhat(chains)?;
        self.entries.push(RhatEntry {
            parameter,
            pass: rhat < self.threshold,
            rhat,
        });
        Ok(())
    }
}

/// Split-R̂ of every element of the given quantities.
pub fn rhat_report(store: &DrawStore, quantities: &[Quantity], threshold: f64) -> Result<RhatReport> {
    let mut report = RhatReport {
        threshold,
        entries: Vec::new(),
    };
    for &q in quantities {
        let trace = store.trace(q).ok_or(Error::NotMonitored(q.name()))?;
        for idx in 0..trace.dim {
            let name = if trace.dim == 1 {
                q.name().to_string()
            } else {
                format!("{}[{}]", q.name(), idx + 1)
            };
            report.push(name, &trace.all_series(idx))?;
        }
    }
    Ok(report)
}

/// Monte Carlo standard error of the mean of one chain by non-overlapping
/// batch means with about √n batches.
pub fn batch_means_mcse(xs: &[f64]) -> f64 {
    let n = xs.len();
    let n_batches = ((n as f64).sqrt().floor() as usize).max(2);
    let size = n / n_batches;
    if size == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..n_batches)
        .map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    (var / n_batches as f64).sqrt()
}

/// MCSE of the pooled mean of independent chains.
pub fn pooled_mcse(chains: &[Vec<f64>]) -> f64 {
    let k = chains.len() as f64;
    (chains.iter().map(|c| batch_means_mcse(c).powi(2)).sum::<f64>()).sqrt() / k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conventions_for_constant_chains() {
        assert_eq!(split_rhat(&[vec![0.25; 10], vec![0.25; 10]]).unwrap(), 1.0);
        assert_eq!(split_rhat(&[vec![0.0; 10], vec![1.0; 10]]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn preconditions() {
        assert!(split_rhat(&[vec![1.0, 2.0, 3.0, 4.0]]).is_err());
        assert!(split_rhat(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn odd_length_drops_last_draw() {
        let a = vec![0.1, 0.5, 0.3, 0.9, 0.2];
        let b = vec![0.4, 0.2, 0.8, 0.6, 7.0];
        let even: Vec<Vec<f64>> = [&a, &b].iter().map(|c| c[..4].to_vec()).collect();
        assert_eq!(split_rhat(&[a.clone(), b.clone()]).unwrap(), split_rhat(&even).unwrap());
    }
}
