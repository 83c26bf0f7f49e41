//! Empirical behaviour of the data generator.

use glshrink_core::simgen::{generate, spec_table, synthetic_observed_v, DeltaScope, LevelSpec, SimSpec, VSource};

const REPLICATES: u64 = 10_000;

fn small_spec(mu_level: LevelSpec, theta_level: LevelSpec) -> SimSpec {
    SimSpec {
        case_id: 1,
        row: 1,
        theta_level,
        mu_level,
        eta: 0.25,
        n_areas: 10,
        n_sources: 2,
        delta_scope: DeltaScope::Unit,
    }
}

struct Pooled {
    mu_var: f64,
    theta_var: f64,
    mu_flag_rate: f64,
    theta_flag_rate: f64,
    n_mu: f64,
    n_theta: f64,
}

fn pooled(spec: &SimSpec) -> Pooled {
    let v = VSource::Fixed(vec![1e-4; spec.n_areas * spec.n_sources]);
    let (mut smu, mut sth, mut fmu, mut fth, mut nmu, mut nth) = (0.0, 0.0, 0usize, 0usize, 0usize, 0usize);
    for r in 0..REPLICATES {
        let p = generate(spec, &v, 2024, r).unwrap();
        for (i, m) in p.truth_mu.iter().enumerate() {
            smu += (m - spec.eta).powi(2);
            for j in 0..spec.n_sources {
                sth += (p.truth_theta[i * spec.n_sources + j] - m).powi(2);
            }
        }
        fmu += p.mu_flags.iter().filter(|f| **f).count();
        fth += p.theta_flags.iter().filter(|f| **f).count();
        nmu += p.truth_mu.len();
        nth += p.truth_theta.len();
    }
    Pooled {
        mu_var: smu / nmu as f64,
        theta_var: sth / nth as f64,
        mu_flag_rate: fmu as f64 / nmu as f64,
        theta_flag_rate: fth as f64 / nth as f64,
        n_mu: nmu as f64,
        n_theta: nth as f64,
    }
}

fn within_rel(label: &str, got: f64, want: f64, rel: f64) {
    assert!((got - want).abs() <= rel * want, "{label}: {got} vs {want}");
}

fn within_binomial(label: &str, rate: f64, p: f64, n: f64) {
    let sd = (p * (1.0 - p) / n).sqrt();
    assert!((rate - p).abs() <= 4.0 * sd, "{label}: rate {rate}, p {p}, 4 sd {}", 4.0 * sd);
}

#[test]
fn outlier_mu_and_mixture_theta_variances() {
    let mu = LevelSpec::Outlier { p: 0.2, tau11: 0.1 };
    let theta = LevelSpec::Mixture {
        p: 0.3,
        tau21: 0.08,
        tau22: 0.01,
    };
    let s = pooled(&small_spec(mu, theta));
    within_rel("mu variance", s.mu_var, 0.2 * 0.01, 0.05);
    within_rel("theta variance", s.theta_var, 0.3 * 0.0064 + 0.7 * 0.0001, 0.05);
    within_binomial("mu flags", s.mu_flag_rate, 0.2, s.n_mu);
    within_binomial("theta flags", s.theta_flag_rate, 0.3, s.n_theta);
}

#[test]
fn mixture_mu_and_outlier_theta_variances() {
    let mu = LevelSpec::Mixture {
        p: 0.1,
        tau21: 0.2,
        tau22: 0.05,
    };
    let theta = LevelSpec::Outlier { p: 0.4, tau11: 0.03 };
    let s = pooled(&small_spec(mu, theta));
    within_rel("mu variance", s.mu_var, 0.1 * 0.04 + 0.9 * 0.0025, 0.05);
    within_rel("theta variance", s.theta_var, 0.4 * 0.0009, 0.05);
    within_binomial("mu flags", s.mu_flag_rate, 0.1, s.n_mu);
    within_binomial("theta flags", s.theta_flag_rate, 0.4, s.n_theta);
}

#[test]
fn source_specific_flags_are_per_area() {
    let spec = spec_table(5).unwrap().into_iter().find(|s| {
        matches!(s.theta_level, LevelSpec::SourceSpecific { p, .. } if p > 0.0 && p < 1.0)
    });
    let spec = spec.expect("a Case 5 row with 0 < p < 1");
    let LevelSpec::SourceSpecific { p, .. } = spec.theta_level else { unreachable!() };
    let v = VSource::Fixed(synthetic_observed_v(spec.n_areas, spec.n_sources, 3));
    let (mut flagged, mut n) = (0usize, 0usize);
    for r in 0..2_000 {
        let g = generate(&spec, &v, 77, r).unwrap();
        for row in g.theta_flags.chunks(spec.n_sources) {
            assert!(!row[0], "source 1 is never aberrant");
            assert!(row[1..].iter().all(|f| *f == row[1]), "one indicator per area");
            flagged += row[1] as usize;
            n += 1;
        }
    }
    within_binomial("area flags", flagged as f64 / n as f64, p, n as f64);
}

#[test]
fn replicates_are_reproducible_and_distinct() {
    let spec = spec_table(2).unwrap()[3].clone();
    let v = VSource::Fixed(synthetic_observed_v(spec.n_areas, spec.n_sources, 1));
    let a = generate(&spec, &v, 5, 17).unwrap();
    let b = generate(&spec, &v, 5, 17).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.truth_mu, generate(&spec, &v, 5, 18).unwrap().truth_mu);
    assert_ne!(a.truth_mu, generate(&spec, &v, 6, 17).unwrap().truth_mu);
    let boot = VSource::Bootstrap(synthetic_observed_v(spec.n_areas, spec.n_sources, 1));
    assert_eq!(generate(&spec, &boot, 5, 3).unwrap(), generate(&spec, &boot, 5, 3).unwrap());
}
