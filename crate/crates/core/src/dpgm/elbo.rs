//! Evidence lower bound of the truncated DP mixture with a conjugate
//! normal-Wishart prior on each component's mean and precision.

use super::{check_data, DpgmHyperparams, VariationalState};
use crate::error::{OedpmError, Result};
use crate::math::{digamma, ln_gamma, ln_multigamma, Matrix, LN_2PI};

use std::f64::consts::LN_2;

/// Full ELBO of `state`:
///
/// `E[ln p(X|Z,μ,Σ)] + E[ln p(Z|v)] + E[ln p(v)] + E[ln p(μ,Σ)]
///  − E[ln q(Z)] − E[ln q(v)] − E[ln q(μ,Σ)]`.
pub fn compute_elbo(
    state: &VariationalState,
    data: &Matrix,
    hyper: &DpgmHyperparams,
) -> Result<f64> {
    check_data(data, hyper)?;
    let k = state.truncation();
    let d = state.dim() as f64;
    let log_weights = state.expected_log_weights()?;
    let factors = state.factors()?;
    let ln_lambda = (0..k)
        .map(|c| state.expected_log_det_precision(c, &factors[c]))
        .collect::<Result<Vec<_>>>()?;

    let mut local = 0.0;
    for (x, r) in data.rows().zip(state.responsibilities.rows()) {
        for c in 0..k {
            let rc = r[c];
            if rc == 0.0 {
                continue;
            }
            let maha = factors[c].mahalanobis_sq(x, state.xi_tilde.row(c));
            let expected_loglik = 0.5
                * (ln_lambda[c] - d / state.b_tilde[c] - state.nu_tilde[c] * maha - d * LN_2PI);
            local += rc * (expected_loglik + log_weights[c] - rc.ln());
        }
    }
    let total = local + global_terms(state, hyper)?;
    if !total.is_finite() {
        return Err(OedpmError::Numeric("ELBO is not finite".into()));
    }
    Ok(total)
}

/// ELBO terms that do not involve the responsibilities: the stick-breaking
/// prior and entropy, and the normal-Wishart prior and entropy.
pub(super) fn global_terms(state: &VariationalState, hyper: &DpgmHyperparams) -> Result<f64> {
    let k = state.truncation();
    let dim = state.dim();
    let d = dim as f64;
    let factors = state.factors()?;
    let psi = hyper.effective_psi();
    let psi_log_det = psi.factor()?.log_det();
    let alpha = hyper.alpha;
    let (b, nu) = (hyper.b, hyper.nu);

    // ln B(Ψ⁻¹, ν) for the Wishart normalizer of the prior.
    let prior_log_norm = 0.5 * nu * psi_log_det - 0.5 * nu * d * LN_2 - ln_multigamma(0.5 * nu, dim);

    let mut total = 0.0;
    for c in 0..k {
        let (g1, g2) = (state.gamma1[c], state.gamma2[c]);
        let dg_sum = digamma(g1 + g2)?;
        let e_log_v = digamma(g1)? - dg_sum;
        let e_log_1mv = digamma(g2)? - dg_sum;

        // E[ln p(v_k)] − E[ln q(v_k)]
        total += alpha.ln() + (alpha - 1.0) * e_log_1mv;
        total -= ln_gamma(g1 + g2) - ln_gamma(g1) - ln_gamma(g2)
            + (g1 - 1.0) * e_log_v
            + (g2 - 1.0) * e_log_1mv;

        let factor = &factors[c];
        let ln_lambda = state.expected_log_det_precision(c, factor)?;
        let (bt, nut) = (state.b_tilde[c], state.nu_tilde[c]);
        let mean_dev = factor.mahalanobis_sq(state.xi_tilde.row(c), &hyper.xi);
        let trace = factor.inv_trace(&psi);

        // E[ln p(μ_k, Λ_k)]
        total += 0.5 * (d * (b.ln() - LN_2PI) + ln_lambda - d * b / bt - b * nut * mean_dev)
            + prior_log_norm
            + 0.5 * (nu - d - 1.0) * ln_lambda
            - 0.5 * nut * trace;

        // E[ln q(μ_k, Λ_k)]
        let post_log_norm =
            0.5 * nut * factor.log_det() - 0.5 * nut * d * LN_2 - ln_multigamma(0.5 * nut, dim);
        let wishart_entropy = -post_log_norm - 0.5 * (nut - d - 1.0) * ln_lambda + 0.5 * nut * d;
        total -= 0.5 * ln_lambda + 0.5 * d * (bt.ln() - LN_2PI) - 0.5 * d - wishart_entropy;
    }
    if !total.is_finite() {
        return Err(OedpmError::Numeric("ELBO prior terms are not finite".into()));
    }
    Ok(total)
}
