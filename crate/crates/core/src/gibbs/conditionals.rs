//! Full conditional distributions, as parameter values.
//!
//! Each function reads the current state and returns the parameters of the
//! distribution the corresponding coordinate is drawn from. The sampler only
//! draws; keeping the algebra here lets the tests compare every conditional
//! against the joint density directly.
//!
//! Inverse gamma is `IG(shape, rate)` with density `∝ x^(-1-shape) e^(-rate/x)`;
//! GIG is `GIG(order, chi, psi)` with kernel `x^(order-1) e^(-(chi/x + psi x)/2)`.

use crate::distributions::{floor_variance, GigParams, InverseGammaParams};
use crate::model::{ChainState, LocalPrior, ModelTag, SourcePanel, ThetaForm};

/// Stand-in for a GIG `chi` that is exactly zero while the order is not
/// positive. Only reachable when every residual entering `chi` is exactly 0.
pub const ZERO_CHI_GUARD: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalParams {
    pub mean: f64,
    pub variance: f64,
}

/// Precision-weighted combination of an observation `y` with variance `v`
/// and a prior mean `m` with variance `a`.
#[inline]
pub fn combine(y: f64, v: f64, m: f64, a: f64) -> NormalParams {
    let s = a + v;
    NormalParams {
        mean: (y * a + m * v) / s,
        variance: a * v / s,
    }
}

/// θ_ij | else ~ N(θ̄_ij, V_θ) with θ̄ = (Y/V + μ/a)/(1/V + 1/a).
pub fn theta(state: &ChainState, panel: &SourcePanel, tag: ModelTag, i: usize, j: usize) -> NormalParams {
    let a = state.theta_variance(tag, i, j);
    combine(panel.y(i, j), panel.v(i, j), state.mu[i], a)
}

/// μ_i | else ~ N((θ̄_i c_i + η d_i)/(c_i + d_i), 1/(c_i + d_i)).
///
/// `c_i = Σ_j 1/a_ij` with θ̄_i the 1/a-weighted mean of θ_i·, and
/// `d_i = 1/(λ²_i τ²₂)`. Without a θ level, `c_i = 1/V_i` and θ̄_i = Y_i.
pub fn mu(state: &ChainState, panel: &SourcePanel, tag: ModelTag, i: usize) -> NormalParams {
    let d = 1.0 / state.mu_variance(tag, i);
    let (theta_bar, c) = if tag.has_theta() {
        let mut c = 0.0;
        let mut acc = 0.0;
        for j in 0..state.n_sources {
            let w = 1.0 / state.theta_variance(tag, i, j);
            c += w;
            acc += w * state.theta[i * state.n_sources + j];
        }
        (acc / c, c)
    } else {
        (panel.y(i, 0), 1.0 / panel.v(i, 0))
    };
    let total = c + d;
    NormalParams {
        mean: theta_bar * (c / total) + state.eta * (d / total),
        variance: 1.0 / total,
    }
}

/// η | else under the flat prior: N(Σ d_i μ_i / Σ d_i, 1/Σ d_i).
pub fn eta(state: &ChainState, tag: ModelTag) -> NormalParams {
    let d: Vec<f64> = (0..state.n_areas).map(|i| 1.0 / state.mu_variance(tag, i)).collect();
    let total: f64 = d.iter().sum();
    let mean = d.iter().zip(&state.mu).map(|(w, m)| (w / total) * m).sum();
    NormalParams {
        mean,
        variance: 1.0 / total,
    }
}

#[inline]
fn theta_resid_sq(state: &ChainState, i: usize, j: usize) -> f64 {
    let r = state.theta[i * state.n_sources + j] - state.mu[i];
    r * r
}

#[inline]
fn mu_resid_sq(state: &ChainState, i: usize) -> f64 {
    let r = state.mu[i] - state.eta;
    r * r
}

fn ig(shape: f64, rate: f64) -> InverseGammaParams {
    InverseGammaParams {
        shape,
        rate: floor_variance(rate),
    }
}

fn gig(order: f64, chi: f64) -> GigParams {
    let chi = if chi <= 0.0 && order <= 0.0 { ZERO_CHI_GUARD } else { chi.max(0.0) };
    GigParams { order, chi, psi: 2.0 }
}

/// Horseshoe λ²_ij | else ~ IG(1, r²_ij / (2 λ²_i τ²₁) + 1/ξ_ij); the λ²_i
/// factor is absent in the source-only form.
pub fn lambda_ij_horseshoe(state: &ChainState, tag: ModelTag, i: usize, j: usize) -> InverseGammaParams {
    let k = i * state.n_sources + j;
    let scale = match tag.theta_form() {
        ThetaForm::Product => state.lambda_i[i] * state.tau1_sq,
        _ => state.tau1_sq,
    };
    ig(1.0, theta_resid_sq(state, i, j) / (2.0 * scale) + 1.0 / state.xi_ij[k])
}

/// Horseshoe λ²_i | else.
///
/// Product form: IG(J/2 + 1, Σ_j r²_ij/(2 λ²_ij τ²₁) + (μ_i-η)²/(2τ²₂) + 1/ξ_i).
/// Otherwise λ²_i only enters the μ level: IG(1, (μ_i-η)²/(2τ²₂) + 1/ξ_i).
pub fn lambda_i_horseshoe(state: &ChainState, tag: ModelTag, i: usize) -> InverseGammaParams {
    let mu_part = mu_resid_sq(state, i) / (2.0 * state.tau2_sq) + 1.0 / state.xi_i[i];
    match tag.theta_form() {
        ThetaForm::Product => {
            let n_j = state.n_sources;
            let theta_part: f64 = (0..n_j)
                .map(|j| {
                    theta_resid_sq(state, i, j) / (2.0 * state.lambda_ij[i * n_j + j] * state.tau1_sq)
                })
                .sum();
            ig((n_j as f64 + 4.0) / 2.0 - 1.0, theta_part + mu_part)
        }
        _ => ig(1.0, mu_part),
    }
}

/// Lasso λ²_ij | else ~ GIG(1/2, r²_ij/(λ²_i τ²₁), 2); λ²_i absent in the
/// source-only form.
pub fn lambda_ij_lasso(state: &ChainState, tag: ModelTag, i: usize, j: usize) -> GigParams {
    let scale = match tag.theta_form() {
        ThetaForm::Product => state.lambda_i[i] * state.tau1_sq,
        _ => state.tau1_sq,
    };
    gig(0.5, theta_resid_sq(state, i, j) / scale)
}

/// Lasso λ²_i | else.
///
/// Product form: GIG((1-J)/2, Σ_j r²_ij/(λ²_ij τ²₁) + (μ_i-η)²/τ²₂, 2).
/// Source-only form: GIG(1/2, (μ_i-η)²/τ²₂, 2).
pub fn lambda_i_lasso(state: &ChainState, tag: ModelTag, i: usize) -> GigParams {
    let mu_part = mu_resid_sq(state, i) / state.tau2_sq;
    match tag.theta_form() {
        ThetaForm::Product => {
            let n_j = state.n_sources;
            let theta_part: f64 = (0..n_j)
                .map(|j| theta_resid_sq(state, i, j) / (state.lambda_ij[i * n_j + j] * state.tau1_sq))
                .sum();
            gig((1.0 - n_j as f64) / 2.0, theta_part + mu_part)
        }
        _ => gig(0.5, mu_part),
    }
}

/// τ²₁ | else ~ IG((IJ+3)/2 - 1, Σ_ij r²_ij / (2 b_ij) + 1/ξ) with b_ij the
/// local part of a_ij.
pub fn tau1(state: &ChainState, tag: ModelTag) -> InverseGammaParams {
    let (n_i, n_j) = (state.n_areas, state.n_sources);
    let mut rate = 0.0;
    for i in 0..n_i {
        for j in 0..n_j {
            let k = i * n_j + j;
            let local = match tag.theta_form() {
                ThetaForm::Product => state.lambda_ij[k] * state.lambda_i[i],
                ThetaForm::SourceOnly => state.lambda_ij[k],
                ThetaForm::Unit | ThetaForm::Absent => 1.0,
            };
            rate += theta_resid_sq(state, i, j) / (2.0 * local);
        }
    }
    ig(((n_i * n_j) as f64 + 3.0) / 2.0 - 1.0, rate + 1.0 / state.xi_tau1)
}

/// τ²₂ | else ~ IG((I+3)/2 - 1, Σ_i (μ_i-η)² / (2 λ²_i) + 1/ξ).
pub fn tau2(state: &ChainState, tag: ModelTag) -> InverseGammaParams {
    let unit = tag.local_prior() == crate::model::LocalPrior::Unit;
    let rate: f64 = (0..state.n_areas)
        .map(|i| {
            let local = if unit { 1.0 } else { state.lambda_i[i] };
            mu_resid_sq(state, i) / (2.0 * local)
        })
        .sum();
    ig((state.n_areas as f64 + 3.0) / 2.0 - 1.0, rate + 1.0 / state.xi_tau2)
}

/// Area `i` with θ_i· integrated out. Given μ_i the sources are independent
/// N(μ_i, s_ij) with s_ij = V_ij + a_ij, which factors into N(ȳ_i; μ_i, h²_i)
/// times a term free of μ_i, whose log (without 2π constants) is `log_rest`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaMarginal {
    pub ybar: f64,
    pub h2: f64,
    pub log_rest: f64,
}

pub fn area_marginal(state: &ChainState, panel: &SourcePanel, tag: ModelTag, i: usize) -> AreaMarginal {
    let n_j = state.n_sources;
    let s = |j: usize| {
        if tag.has_theta() {
            panel.v(i, j) + state.theta_variance(tag, i, j)
        } else {
            panel.v(i, j)
        }
    };
    let (mut prec, mut acc, mut log_s) = (0.0, 0.0, 0.0);
    for j in 0..n_j {
        let sj = s(j);
        prec += 1.0 / sj;
        acc += panel.y(i, j) / sj;
        log_s += sj.ln();
    }
    let ybar = acc / prec;
    let h2 = 1.0 / prec;
    let ss: f64 = (0..n_j).map(|j| (panel.y(i, j) - ybar).powi(2) / s(j)).sum();
    AreaMarginal {
        ybar,
        h2,
        log_rest: -0.5 * (log_s + ss - h2.ln()),
    }
}

/// Log density of ln λ²_i given η and every variance, with μ_i and θ_i·
/// integrated out, up to a constant. Reads λ²_i from the state.
pub fn lambda_i_collapsed_log_target(state: &ChainState, panel: &SourcePanel, tag: ModelTag, i: usize) -> f64 {
    let m = area_marginal(state, panel, tag, i);
    let total = state.mu_variance(tag, i) + m.h2;
    let lik = m.log_rest - 0.5 * total.ln() - 0.5 * (m.ybar - state.eta).powi(2) / total;
    let l = state.lambda_i[i];
    let prior = match tag.local_prior() {
        LocalPrior::Horseshoe => -1.5 * l.ln() - 1.0 / (state.xi_i[i] * l),
        LocalPrior::Lasso => -l,
        LocalPrior::Unit => 0.0,
    };
    lik + prior + l.ln()
}

/// Auxiliary of a horseshoe variance υ: ξ | υ ~ IG(1, 1 + 1/υ).
pub fn aux(variance: f64) -> InverseGammaParams {
    ig(1.0, 1.0 + 1.0 / variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::RngStream;
    use crate::model::init_state;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
    }

    fn state_2x2(tag: ModelTag) -> (ChainState, SourcePanel) {
        let panel = SourcePanel::unlabeled(2, 2, vec![0.2, 0.3, 0.25, 0.25], &[0.01; 4]).unwrap();
        let s = init_state(&panel, tag, 0.0, &mut RngStream::new(0, 0)).unwrap();
        (s, panel)
    }

    #[test]
    fn theta_worked_example() {
        let p = combine(0.3, 0.01, 0.25, 0.04);
        assert!(close(p.mean, 0.29));
        assert!(close(p.variance, 0.008));
    }

    #[test]
    fn theta_equal_precision_and_precise_data() {
        let p = combine(0.4, 0.02, 0.2, 0.02);
        assert!(close(p.mean, 0.3) && close(p.variance, 0.01));
        let p = combine(0.4, 1e-12, 0.2, 1.0);
        assert!((p.mean - 0.4).abs() < 1e-11);
    }

    #[test]
    fn mu_worked_example() {
        // θ_1 = (0.2, 0.3), a = (0.01, 0.01), η = 0.25, d = 100
        let (mut s, panel) = state_2x2(ModelTag::M12);
        s.tau1_sq = 0.01;
        s.tau2_sq = 0.01;
        s.eta = 0.25;
        let p = mu(&s, &panel, ModelTag::M12, 0);
        assert!(close(p.mean, 0.25));
        assert!(close(p.variance, 1.0 / 300.0));
    }

    #[test]
    fn mu_limits() {
        let (mut s, panel) = state_2x2(ModelTag::M12);
        s.tau1_sq = 0.01;
        s.eta = 0.0;
        // d → 0: no pooling
        s.tau2_sq = 1e12;
        assert!((mu(&s, &panel, ModelTag::M12, 0).mean - 0.25).abs() < 1e-12);
        // c = d: midpoint of θ̄ and η
        s.tau2_sq = 0.005;
        assert!(close(mu(&s, &panel, ModelTag::M12, 0).mean, 0.125));
    }

    #[test]
    fn eta_examples() {
        let (mut s, _) = state_2x2(ModelTag::M12);
        s.mu = vec![0.2, 0.3];
        s.tau2_sq = 0.01;
        let p = eta(&s, ModelTag::M12);
        assert!(close(p.mean, 0.25) && close(p.variance, 0.005));
        // d = (300, 100)
        s.lambda_i = vec![1.0 / 3.0, 1.0];
        let p = eta(&s, ModelTag::M1a);
        assert!(close(p.mean, 0.225) && close(p.variance, 0.0025));
        // the unit prior ignores λ
        let p = eta(&s, ModelTag::M12);
        assert!(close(p.mean, 0.25) && close(p.variance, 0.005));
        s.mu = vec![0.7, 0.7];
        assert!(close(eta(&s, ModelTag::M1a).mean, 0.7));
    }

    #[test]
    fn horseshoe_lambda_i_worked_example() {
        // J = 2, residuals 0.1, λ²_ij = 1, τ²₁ = 0.01, μ = η, ξ = 1
        let (mut s, _) = state_2x2(ModelTag::M11a);
        s.mu[0] = 0.5;
        s.eta = 0.5;
        s.theta[0] = 0.6;
        s.theta[1] = 0.4;
        s.tau1_sq = 0.01;
        let p = lambda_i_horseshoe(&s, ModelTag::M11a, 0);
        assert!(close(p.shape, 2.0));
        assert!(close(p.rate, 2.0));
        // source-only form: only the μ level
        let p = lambda_i_horseshoe(&s, ModelTag::M1a, 0);
        assert!(close(p.shape, 1.0) && close(p.rate, 1.0));
    }

    #[test]
    fn horseshoe_zero_residual() {
        let (mut s, _) = state_2x2(ModelTag::M11a);
        s.theta[0] = s.mu[0];
        s.xi_ij[0] = 4.0;
        let p = lambda_ij_horseshoe(&s, ModelTag::M11a, 0, 0);
        assert!(close(p.shape, 1.0) && close(p.rate, 0.25));
    }

    #[test]
    fn lasso_orders_and_chi() {
        let (mut s, _) = state_2x2(ModelTag::M11b);
        assert!(close(lambda_i_lasso(&s, ModelTag::M11b, 0).order, -0.5));
        // residual 0.2, λ²_i = 1, τ²₁ = 0.04 ⇒ chi = 1
        s.theta[0] = s.mu[0] + 0.2;
        s.tau1_sq = 0.04;
        let p = lambda_ij_lasso(&s, ModelTag::M11b, 0, 0);
        assert!(close(p.order, 0.5) && close(p.chi, 1.0) && p.psi == 2.0);
        // source-only λ²_i has order 1/2
        assert!(close(lambda_i_lasso(&s, ModelTag::M1b, 0).order, 0.5));
    }

    #[test]
    fn lasso_zero_chi_guard() {
        let (mut s, _) = state_2x2(ModelTag::M11b);
        s.theta[0] = s.mu[0];
        s.theta[1] = s.mu[0];
        s.eta = s.mu[0];
        let p = lambda_i_lasso(&s, ModelTag::M11b, 0);
        assert_eq!(p.chi, ZERO_CHI_GUARD);
        assert!(p.validate().is_ok());
        // positive order keeps chi = 0 (gamma regime)
        let p = lambda_ij_lasso(&s, ModelTag::M11b, 0, 0);
        assert_eq!(p.chi, 0.0);
    }

    #[test]
    fn tau_shapes_and_rates() {
        let panel = SourcePanel::unlabeled(62, 2, vec![0.25; 124], &[1e-3; 124]).unwrap();
        let s = init_state(&panel, ModelTag::M11a, 0.0, &mut RngStream::new(0, 0)).unwrap();
        assert!(close(tau1(&s, ModelTag::M11a).shape, 62.5));
        // zero residuals, ξ = 1 ⇒ rate 1
        let p = tau2(&s, ModelTag::M11a);
        assert!(close(p.shape, (62.0 + 3.0) / 2.0 - 1.0) && close(p.rate, 1.0));

        // I = J = 2, θ residuals all 0.1, unit locals ⇒ rate 4·0.01/2 + 1
        let (mut s, _) = state_2x2(ModelTag::M11a);
        s.mu = vec![0.0, 0.0];
        s.theta = vec![0.1, -0.1, 0.1, 0.1];
        assert!(close(tau1(&s, ModelTag::M11a).rate, 1.02));
    }

    #[test]
    fn aux_conditional() {
        let p = aux(0.5);
        assert!(close(p.shape, 1.0) && close(p.rate, 3.0));
    }
}
