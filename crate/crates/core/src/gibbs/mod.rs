//! Gibbs sampler for the global-local shrinkage models.
//!
//! One sweep updates the means, then the local variances (with their
//! auxiliaries), then τ²₁ and τ²₂ (with theirs). By default the means are
//! drawn jointly (η marginally, then μ | η, then θ | μ), preceded by a
//! Metropolis move on each λ²_i with its μ_i and θ_i· integrated out;
//! `Scan::SingleSite` instead updates θ, μ, η one at a time. Horseshoe variances use the
//! inverse-gamma scale mixture of the half-Cauchy; lasso local variances are
//! drawn from their GIG conditionals.

pub mod conditionals;
mod checkpoint;
mod store;

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

pub use checkpoint::{resume, Checkpoint};
pub use store::{ChainDraws, DrawStore, Quantity, Trace};

use crate::distributions::{floor_variance, inv_gamma_unchecked, std_normal, RngStream};
use crate::model::{init_state, ChainState, LocalPrior, ModelTag, SamplerSettings, Scan, SourcePanel};
use crate::summary::shrinkage_factors;
use crate::{Error, Result};

/// Drives one chain. Owns the state and the random stream.
#[derive(Debug, Clone)]
pub struct ChainRunner {
    panel: SourcePanel,
    tag: ModelTag,
    settings: SamplerSettings,
    stream_id: u64,
    freeze_local: bool,
    state: ChainState,
    rng: RngStream,
    iteration: usize,
    draws: ChainDraws,
}

impl ChainRunner {
    pub fn new(panel: &SourcePanel, tag: ModelTag, settings: &SamplerSettings, stream_id: u64) -> Result<Self> {
        settings.validate()?;
        let mut rng = RngStream::new(settings.seed, stream_id);
        let state = init_state(panel, tag, settings.overdispersion, &mut rng)?;
        Ok(Self {
            panel: panel.clone(),
            tag,
            settings: settings.clone(),
            stream_id,
            freeze_local: false,
            state,
            rng,
            iteration: 0,
            draws: ChainDraws {
                stream_id,
                ..Default::default()
            },
        })
    }

    /// Keeps the local variances at their current values (1 at start). With
    /// the product form this reproduces the fixed-local model exactly.
    pub fn with_frozen_local_variances(mut self) -> Self {
        self.freeze_local = true;
        self
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ChainState {
        &mut self.state
    }

    pub fn rng_mut(&mut self) -> &mut RngStream {
        &mut self.rng
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.settings.n_iter
    }

    /// One full sweep without recording.
    pub fn sweep(&mut self) {
        let (panel, tag) = (&self.panel, self.tag);
        match self.settings.scan {
            Scan::Blocked => {
                if !self.freeze_local && tag.local_prior() != LocalPrior::Unit {
                    update_lambda_i_collapsed(&mut self.state, panel, tag, &mut self.rng);
                }
                update_means_blocked(&mut self.state, panel, tag, &mut self.rng)
            }
            Scan::SingleSite => {
                if tag.has_theta() {
                    update_theta(&mut self.state, panel, tag, &mut self.rng);
                }
                update_mu(&mut self.state, panel, tag, &mut self.rng);
                update_eta(&mut self.state, tag, &mut self.rng);
            }
        }
        if !self.freeze_local {
            match tag.local_prior() {
                LocalPrior::Horseshoe => update_local_variances_horseshoe(&mut self.state, tag, &mut self.rng),
                LocalPrior::Lasso => update_local_variances_lasso(&mut self.state, tag, &mut self.rng),
                LocalPrior::Unit => {}
            }
        }
        update_global_variances(&mut self.state, tag, &mut self.rng);
    }

    /// Sweeps, checks the state, and records the draw when it is kept.
    pub fn step(&mut self) -> Result<()> {
        self.sweep();
        self.iteration += 1;
        if let Some(coordinate) = self.state.find_invalid() {
            return Err(Error::NonFinite {
                chain: self.stream_id,
                iteration: self.iteration,
                coordinate,
            });
        }
        let t = self.iteration;
        if t > self.settings.n_burnin && (t - self.settings.n_burnin) % self.settings.thin == 0 {
            self.record();
        }
        Ok(())
    }

    /// Runs until `iteration == min(target, n_iter)`.
    pub fn run_until(&mut self, target: usize) -> Result<()> {
        while self.iteration < target.min(self.settings.n_iter) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<ChainDraws> {
        self.run_until(self.settings.n_iter)?;
        Ok(self.draws)
    }

    fn record(&mut self) {
        let m = self.settings.monitor;
        let s = &self.state;
        if m.mu {
            self.draws.push(Quantity::Mu, &s.mu);
        }
        if m.theta && self.tag.has_theta() {
            self.draws.push(Quantity::Theta, &s.theta);
        }
        if m.phi {
            let phi = shrinkage_factors(s, &self.panel, self.tag);
            self.draws.push(Quantity::Phi, &phi);
        }
        if m.eta {
            self.draws.push(Quantity::Eta, &[s.eta]);
        }
        if m.variances {
            if self.tag.local_prior() != LocalPrior::Unit {
                if self.tag.has_theta() {
                    self.draws.push(Quantity::LambdaIj, &s.lambda_ij);
                }
                self.draws.push(Quantity::LambdaI, &s.lambda_i);
            }
            if self.tag.has_theta() {
                self.draws.push(Quantity::Tau1Sq, &[s.tau1_sq]);
            }
            self.draws.push(Quantity::Tau2Sq, &[s.tau2_sq]);
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        cp.into_runner()
    }
}

/// Joint draw of (η, μ, θ) given the variances.
///
/// With θ integrated out, ȳ_i ~ N(μ_i, h²_i) where ȳ_i is the 1/(V+a)
/// weighted source mean; with μ also integrated out, ȳ_i ~ N(η, A_i + h²_i).
pub fn update_means_blocked(state: &mut ChainState, panel: &SourcePanel, tag: ModelTag, rng: &mut RngStream) {
    let m: Vec<_> = (0..state.n_areas)
        .map(|i| conditionals::area_marginal(state, panel, tag, i))
        .collect();
    let w: Vec<f64> = m
        .iter()
        .enumerate()
        .map(|(i, mi)| 1.0 / (state.mu_variance(tag, i) + mi.h2))
        .collect();
    let total: f64 = w.iter().sum();
    let mean: f64 = w.iter().zip(&m).map(|(wi, mi)| (wi / total) * mi.ybar).sum();
    state.eta = mean + (1.0 / total).sqrt() * std_normal(rng);

    for (i, mi) in m.iter().enumerate() {
        let (c, d) = (1.0 / mi.h2, 1.0 / state.mu_variance(tag, i));
        let t = c + d;
        state.mu[i] = mi.ybar * (c / t) + state.eta * (d / t) + (1.0 / t).sqrt() * std_normal(rng);
    }
    if tag.has_theta() {
        update_theta(state, panel, tag, rng);
    }
}

/// Random-walk step on ln λ²_i.
pub const LAMBDA_I_STEP: f64 = 1.5;

/// One Metropolis step per area on ln λ²_i with μ_i and θ_i· integrated out.
/// Leaves μ and θ stale, so a draw of the means must follow.
pub fn update_lambda_i_collapsed(state: &mut ChainState, panel: &SourcePanel, tag: ModelTag, rng: &mut RngStream) {
    for i in 0..state.n_areas {
        let old = state.lambda_i[i];
        let before = conditionals::lambda_i_collapsed_log_target(state, panel, tag, i);
        state.lambda_i[i] = old * (LAMBDA_I_STEP * std_normal(rng)).exp();
        let after = conditionals::lambda_i_collapsed_log_target(state, panel, tag, i);
        let u: f64 = rng.random();
        if !(after.is_finite() && u.ln() < after - before) {
            state.lambda_i[i] = old;
        }
    }
}

pub fn update_theta(state: &mut ChainState, panel: &SourcePanel, tag: ModelTag, rng: &mut RngStream) {
    for i in 0..state.n_areas {
        for j in 0..state.n_sources {
            let p = conditionals::theta(state, panel, tag, i, j);
            state.theta[i * state.n_sources + j] = p.mean + p.variance.sqrt() * std_normal(rng);
        }
    }
}

pub fn update_mu(state: &mut ChainState, panel: &SourcePanel, tag: ModelTag, rng: &mut RngStream) {
    for i in 0..state.n_areas {
        let p = conditionals::mu(state, panel, tag, i);
        state.mu[i] = p.mean + p.variance.sqrt() * std_normal(rng);
    }
}

pub fn update_eta(state: &mut ChainState, tag: ModelTag, rng: &mut RngStream) {
    let p = conditionals::eta(state, tag);
    state.eta = p.mean + p.variance.sqrt() * std_normal(rng);
}

fn draw_aux(variance: f64, rng: &mut RngStream) -> f64 {
    let p = conditionals::aux(variance);
    inv_gamma_unchecked(p.shape, p.rate, rng)
}

/// λ²_ij (then ξ_ij) for every cell, then λ²_i (then ξ_i) for every area.
pub fn update_local_variances_horseshoe(state: &mut ChainState, tag: ModelTag, rng: &mut RngStream) {
    if tag.local_prior() != LocalPrior::Horseshoe {
        return;
    }
    if tag.has_theta() {
        for i in 0..state.n_areas {
            for j in 0..state.n_sources {
                let k = i * state.n_sources + j;
                let p = conditionals::lambda_ij_horseshoe(state, tag, i, j);
                state.lambda_ij[k] = inv_gamma_unchecked(p.shape, p.rate, rng);
                state.xi_ij[k] = draw_aux(state.lambda_ij[k], rng);
            }
        }
    }
    for i in 0..state.n_areas {
        let p = conditionals::lambda_i_horseshoe(state, tag, i);
        state.lambda_i[i] = inv_gamma_unchecked(p.shape, p.rate, rng);
        state.xi_i[i] = draw_aux(state.lambda_i[i], rng);
    }
}

pub fn update_local_variances_lasso(state: &mut ChainState, tag: ModelTag, rng: &mut RngStream) {
    if tag.local_prior() != LocalPrior::Lasso {
        return;
    }
    for i in 0..state.n_areas {
        for j in 0..state.n_sources {
            let p = conditionals::lambda_ij_lasso(state, tag, i, j);
            state.lambda_ij[i * state.n_sources + j] = floor_variance(p.sample(rng));
        }
    }
    for i in 0..state.n_areas {
        let p = conditionals::lambda_i_lasso(state, tag, i);
        state.lambda_i[i] = floor_variance(p.sample(rng));
    }
}

/// τ²₁ (when there is a θ level) then τ²₂, each followed by its auxiliary.
pub fn update_global_variances(state: &mut ChainState, tag: ModelTag, rng: &mut RngStream) {
    if tag.has_theta() {
        let p = conditionals::tau1(state, tag);
        state.tau1_sq = inv_gamma_unchecked(p.shape, p.rate, rng);
        state.xi_tau1 = draw_aux(state.tau1_sq, rng);
    }
    let p = conditionals::tau2(state, tag);
    state.tau2_sq = inv_gamma_unchecked(p.shape, p.rate, rng);
    state.xi_tau2 = draw_aux(state.tau2_sq, rng);
}

/// Runs a single chain on stream `stream_id` of `settings.seed`.
pub fn run_chain(
    panel: &SourcePanel,
    tag: ModelTag,
    settings: &SamplerSettings,
    stream_id: u64,
) -> Result<ChainDraws> {
    ChainRunner::new(panel, tag, settings, stream_id)?.run()
}

/// Runs `settings.n_chains` chains on streams `0..n_chains`, in parallel on
/// the current rayon pool. The result does not depend on scheduling.
pub fn run_chains(panel: &SourcePanel, tag: ModelTag, settings: &SamplerSettings) -> Result<DrawStore> {
    run_chains_from(panel, tag, settings, 0, true)
}

pub fn run_chains_serial(panel: &SourcePanel, tag: ModelTag, settings: &SamplerSettings) -> Result<DrawStore> {
    run_chains_from(panel, tag, settings, 0, false)
}

/// Chains use streams `first_stream + c`.
pub fn run_chains_from(
    panel: &SourcePanel,
    tag: ModelTag,
    settings: &SamplerSettings,
    first_stream: u64,
    parallel: bool,
) -> Result<DrawStore> {
    settings.validate()?;
    let ids: Vec<u64> = (0..settings.n_chains as u64).map(|c| first_stream + c).collect();
    let chains: Vec<ChainDraws> = if parallel {
        ids.par_iter()
            .map(|&id| run_chain(panel, tag, settings, id))
            .collect::<Result<_>>()?
    } else {
        ids.iter()
            .map(|&id| run_chain(panel, tag, settings, id))
            .collect::<Result<_>>()?
    };
    Ok(DrawStore::from_chains(
        tag,
        settings.clone(),
        panel.n_areas(),
        panel.n_sources(),
        chains,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Monitor;

    fn panel() -> SourcePanel {
        let y = vec![0.21, 0.25, 0.30, 0.27, 0.15, 0.22, 0.40, 0.31];
        let v = vec![4e-4, 1e-4, 9e-4, 2e-4, 6e-4, 1e-4, 8e-4, 3e-4];
        SourcePanel::unlabeled(4, 2, y, &v).unwrap()
    }

    fn settings(n_iter: usize, n_burnin: usize) -> SamplerSettings {
        SamplerSettings {
            n_iter,
            n_burnin,
            n_chains: 1,
            thin: 1,
            seed: 11,
            overdispersion: 0.0,
            monitor: Monitor::all(),
            scan: Default::default(),
        }
    }

    #[test]
    fn kept_draw_bookkeeping() {
        let d = run_chain(&panel(), ModelTag::M11a, &settings(10, 5), 0).unwrap();
        assert_eq!(d.kept(), 5);
        assert_eq!(d.values[&Quantity::Mu].len(), 5 * 4);
        let mut s = settings(20, 4);
        s.thin = 3;
        let d = run_chain(&panel(), ModelTag::M1b, &s, 0).unwrap();
        assert_eq!(d.kept(), s.kept_per_chain());
        assert_eq!(d.kept(), 5);
    }

    #[test]
    fn identical_streams_are_bit_identical() {
        for tag in ModelTag::ALL {
            let p = if tag == ModelTag::OneSource {
                panel().select_source(0).unwrap()
            } else {
                panel()
            };
            let a = run_chain(&p, tag, &settings(300, 100), 3).unwrap();
            let b = run_chain(&p, tag, &settings(300, 100), 3).unwrap();
            assert_eq!(a, b, "{tag}");
        }
    }

    #[test]
    fn variance_draws_stay_positive() {
        for tag in [ModelTag::M11a, ModelTag::M11b, ModelTag::M1a, ModelTag::M1b] {
            let d = run_chain(&panel(), tag, &settings(2000, 0), 1).unwrap();
            for q in [Quantity::LambdaIj, Quantity::LambdaI, Quantity::Tau1Sq, Quantity::Tau2Sq] {
                assert!(d.values[&q].iter().all(|x| *x > 0.0 && x.is_finite()), "{tag} {q:?}");
            }
        }
    }

    #[test]
    fn frozen_product_model_reproduces_fixed_local_model() {
        let s = settings(500, 0);
        let frozen = ChainRunner::new(&panel(), ModelTag::M11a, &s, 5)
            .unwrap()
            .with_frozen_local_variances()
            .run()
            .unwrap();
        let m12 = run_chain(&panel(), ModelTag::M12, &s, 5).unwrap();
        for q in [Quantity::Mu, Quantity::Theta, Quantity::Eta, Quantity::Tau1Sq, Quantity::Tau2Sq, Quantity::Phi] {
            assert_eq!(frozen.values[&q], m12.values[&q], "{q:?}");
        }
    }

    #[test]
    fn serial_and_parallel_agree() {
        let mut s = settings(400, 100);
        s.n_chains = 5;
        s.overdispersion = 0.05;
        let a = run_chains(&panel(), ModelTag::M1a, &s).unwrap();
        let b = run_chains_serial(&panel(), ModelTag::M1a, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_chains(), 5);
    }

    #[test]
    fn zero_chains_is_an_error() {
        let mut s = settings(10, 0);
        s.n_chains = 0;
        assert!(matches!(run_chains(&panel(), ModelTag::M12, &s), Err(Error::Parameter(_))));
    }

    #[test]
    fn non_finite_state_aborts_with_location() {
        let mut r = ChainRunner::new(&panel(), ModelTag::M12, &settings(10, 0), 2).unwrap();
        r.state_mut().tau2_sq = f64::NAN;
        match r.run_until(10) {
            Err(Error::NonFinite { chain, iteration, .. }) => {
                assert_eq!((chain, iteration), (2, 1));
            }
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }
}
