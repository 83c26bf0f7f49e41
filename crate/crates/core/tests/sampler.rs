//! Whole-sweep checks of the Gibbs sampler.

mod common;

use glshrink_core::diagnostics::batch_means_mcse;
use glshrink_core::distributions::RngStream;
use glshrink_core::gibbs::ChainRunner;
use glshrink_core::oracle::{battery, metropolis_posterior, posterior_states, OracleConfig, TinyInstance};
use glshrink_core::summary::decompose;
use glshrink_core::{ChainState, ModelTag, Monitor, SamplerSettings, Scan};

fn settings(scan: Scan) -> SamplerSettings {
    SamplerSettings {
        n_iter: 1,
        n_burnin: 0,
        n_chains: 1,
        thin: 1,
        seed: 61,
        overdispersion: 0.0,
        monitor: Monitor::mu_only(),
        scan,
    }
}

/// Coordinates whose first and second moments are compared.
fn features(s: &ChainState, tag: ModelTag) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = s.mu.iter().enumerate().map(|(i, m)| (format!("mu[{}]", i + 1), *m)).collect();
    out.push(("eta".into(), s.eta));
    out.push(("ln tau2".into(), s.tau2_sq.ln()));
    if tag.has_theta() {
        out.push(("ln tau1".into(), s.tau1_sq.ln()));
        out.push(("theta[1,1]".into(), s.theta[0]));
    }
    if tag.local_prior() != glshrink_core::model::LocalPrior::Unit {
        out.push(("ln lambda_i[1]".into(), s.lambda_i[0].ln()));
    }
    out
}

fn exact_states(inst: &TinyInstance, k: u64) -> Vec<ChainState> {
    let config = OracleConfig {
        n_iter: 200_000,
        keep_every: Some(50),
        replicates: 1,
        ..OracleConfig::default()
    };
    let o = metropolis_posterior(inst, &config, &mut RngStream::new(808, k)).unwrap();
    posterior_states(inst, &o, &mut RngStream::new(809, k))
}

/// Starting from exact posterior draws, one sweep must leave the first and
/// second moments where they were.
#[test]
fn one_sweep_preserves_posterior_moments() {
    let mut worst = (0.0f64, String::new());
    for (k, inst) in battery().iter().enumerate() {
        let states = exact_states(inst, k as u64);
        for scan in [Scan::Blocked, Scan::SingleSite] {
            let mut runner = ChainRunner::new(&inst.panel, inst.tag, &settings(scan), k as u64).unwrap();
            let mut diffs: Vec<Vec<(f64, f64)>> = Vec::new();
            for s in &states {
                *runner.state_mut() = s.clone();
                runner.sweep();
                let before = features(s, inst.tag);
                let after = features(runner.state(), inst.tag);
                diffs.push(
                    before
                        .iter()
                        .zip(&after)
                        .map(|((_, b), (_, a))| (a - b, a * a - b * b))
                        .collect(),
                );
            }
            let names = features(&states[0], inst.tag);
            for (c, (name, _)) in names.iter().enumerate() {
                for (moment, pick) in [("mean", 0), ("second moment", 1)] {
                    let d: Vec<f64> = diffs.iter().map(|r| if pick == 0 { r[c].0 } else { r[c].1 }).collect();
                    let m = d.iter().sum::<f64>() / d.len() as f64;
                    let se = batch_means_mcse(&d);
                    let z = m.abs() / se;
                    let label = format!("{} {} {scan:?} {name} {moment}", inst.name, inst.tag);
                    if z > worst.0 {
                        worst = (z, label.clone());
                    }
                    assert!(z < 4.0, "{label}: change {m:e} is {z:.2} standard errors");
                }
            }
        }
    }
    println!("largest change: {:.2} se at {}", worst.0, worst.1);
}

/// The posterior mean of μ_i and the draw average of E(μ_i | y, Ω) estimate
/// the same number.
#[test]
fn rao_blackwellized_means_agree_with_draw_means() {
    let panel = common::county_panel(41);
    for tag in ModelTag::ALL {
        let panel = if tag == ModelTag::OneSource { panel.select_source(1).unwrap() } else { panel.clone() };
        let s = SamplerSettings {
            n_iter: 6_000,
            n_burnin: 1_000,
            ..settings(Scan::default())
        };
        let mut runner = ChainRunner::new(&panel, tag, &s, 3).unwrap();
        runner.run_until(s.n_burnin).unwrap();
        let n_i = panel.n_areas();
        let mut gap: Vec<Vec<f64>> = vec![Vec::new(); n_i];
        while !runner.is_done() {
            runner.step().unwrap();
            let st = runner.state();
            let cm = decompose(st, &panel, tag).conditional_mean;
            for i in 0..n_i {
                gap[i].push(st.mu[i] - cm[i]);
            }
        }
        for (i, g) in gap.iter().enumerate() {
            let m = g.iter().sum::<f64>() / g.len() as f64;
            let se = batch_means_mcse(g);
            assert!(m.abs() <= 4.0 * se, "{tag} mu[{}]: gap {m:e}, 4 MCSE {:e}", i + 1, 4.0 * se);
        }
    }
}

#[test]
fn variances_stay_positive_over_long_runs() {
    let panel = common::county_panel(42);
    for tag in ModelTag::ALL {
        let panel = if tag == ModelTag::OneSource { panel.select_source(0).unwrap() } else { panel.clone() };
        for scan in [Scan::Blocked, Scan::SingleSite] {
            let s = SamplerSettings {
                n_iter: 3_000,
                ..settings(scan)
            };
            let mut runner = ChainRunner::new(&panel, tag, &s, 9).unwrap();
            while !runner.is_done() {
                runner.step().unwrap();
                let st = runner.state();
                let all = st.lambda_ij.iter().chain(&st.lambda_i).chain(&st.xi_ij).chain(&st.xi_i);
                assert!(all.chain([&st.tau1_sq, &st.tau2_sq]).all(|v| *v > 0.0 && v.is_finite()), "{tag} {scan:?}");
            }
        }
    }
}
