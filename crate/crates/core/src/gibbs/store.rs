use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{ModelTag, SamplerSettings};

/// A monitored quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quantity {
    Mu,
    Theta,
    Phi,
    Eta,
    LambdaIj,
    LambdaI,
    Tau1Sq,
    Tau2Sq,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::Mu => "mu",
            Quantity::Theta => "theta",
            Quantity::Phi => "phi",
            Quantity::Eta => "eta",
            Quantity::LambdaIj => "lambda_ij",
            Quantity::LambdaI => "lambda_i",
            Quantity::Tau1Sq => "tau1_sq",
            Quantity::Tau2Sq => "tau2_sq",
        }
    }
}

/// Kept draws of one quantity from one chain, row-major by kept iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub stream_id: u64,
    pub dims: BTreeMap<Quantity, usize>,
    pub values: BTreeMap<Quantity, Vec<f64>>,
}

impl ChainDraws {
    pub(crate) fn push(&mut self, q: Quantity, draw: &[f64]) {
        self.dims.entry(q).or_insert(draw.len());
        self.values.entry(q).or_default().extend_from_slice(draw);
    }

    pub fn kept(&self) -> usize {
        self.values
            .iter()
            .next()
            .map(|(q, v)| v.len() / self.dims[q].max(1))
            .unwrap_or(0)
    }
}

/// Draws of one quantity across chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub dim: usize,
    /// `chains[c][k * dim + idx]`
    pub chains: Vec<Vec<f64>>,
}

impl Trace {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn kept(&self) -> usize {
        self.chains.first().map_or(0, |c| c.len() / self.dim.max(1))
    }

    /// Draw sequence of element `idx` in chain `chain`.
    pub fn series(&self, chain: usize, idx: usize) -> Vec<f64> {
        self.chains[chain].iter().skip(idx).step_by(self.dim).copied().collect()
    }

    pub fn all_series(&self, idx: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains()).map(|c| self.series(c, idx)).collect()
    }

    /// Draws of element `idx` pooled over chains, chain by chain.
    pub fn pooled(&self, idx: usize) -> Vec<f64> {
        (0..self.n_chains()).flat_map(|c| self.series(c, idx)).collect()
    }

    pub fn draw(&self, chain: usize, k: usize) -> &[f64] {
        &self.chains[chain][k * self.dim..(k + 1) * self.dim]
    }
}

/// Post-burn-in draws of every monitored quantity across all chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawStore {
    pub tag: ModelTag,
    pub settings: SamplerSettings,
    pub n_areas: usize,
    pub n_sources: usize,
    pub traces: BTreeMap<Quantity, Trace>,
}

impl DrawStore {
    pub fn from_chains(
        tag: ModelTag,
        settings: SamplerSettings,
        n_areas: usize,
        n_sources: usize,
        chains: Vec<ChainDraws>,
    ) -> Self {
        let mut traces: BTreeMap<Quantity, Trace> = BTreeMap::new();
        for chain in chains {
            for (q, values) in chain.values {
                traces
                    .entry(q)
                    .or_insert_with(|| Trace {
                        dim: chain.dims[&q],
                        chains: Vec::new(),
                    })
                    .chains
                    .push(values);
            }
        }
        Self {
            tag,
            settings,
            n_areas,
            n_sources,
            traces,
        }
    }

    pub fn trace(&self, q: Quantity) -> Option<&Trace> {
        self.traces.get(&q)
    }

    pub fn n_chains(&self) -> usize {
        self.traces.values().next().map_or(0, Trace::n_chains)
    }

    pub fn kept_per_chain(&self) -> usize {
        self.traces.values().next().map_or(0, Trace::kept)
    }
}
