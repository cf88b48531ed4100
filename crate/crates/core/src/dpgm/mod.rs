//! Truncated Dirichlet-process Gaussian mixture fitted by mean-field
//! coordinate-ascent variational inference.
//!
//! The variational family is
//!
//! * `q(z_i) = Discrete(π̃_i·)` for every instance,
//! * `q(v_k) = Beta(γ̃_k1, γ̃_k2)` for the stick-breaking fractions,
//! * `q(μ_k, Σ_k) = NIW(ξ̃_k, b̃_k, ν̃_k, Ψ̃_k)` for the component parameters.
//!
//! In [`CovarianceMode::Diagonal`] the prior scale `Ψ` and every `Ψ̃_k` are
//! kept diagonal. The Wishart expectations (the digamma sum over
//! `(ν̃_k + 1 − j)/2`) are unchanged, so the diagonal update is the exact
//! coordinate maximizer of the same objective restricted to diagonal scale
//! matrices and the ELBO stays monotone in both modes.

mod elbo;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{OedpmError, Result};
use crate::math::{digamma, log_sum_exp_unchecked, Covariance, Factor, Matrix, LN_2PI};

pub use elbo::compute_elbo;

/// Default truncation level.
pub const DEFAULT_TRUNCATION: usize = 30;
/// Relative ridge (times the mean prior scale diagonal) added to every `Ψ̃_k`.
pub const RIDGE_FACTOR: f64 = 1e-6;
/// Weight of the Dirichlet(1) jitter mixed into the initial hard assignments.
pub const INIT_JITTER: f64 = 0.05;
/// Replacement for zero-variance entries of the empirical prior scale.
pub const MIN_VARIANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    #[default]
    Diagonal,
    Full,
}

impl std::fmt::Display for CovarianceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CovarianceMode::Diagonal => "diagonal",
            CovarianceMode::Full => "full",
        })
    }
}

/// Prior constants of one mixture fit.
#[derive(Debug, Clone, PartialEq)]
pub struct DpgmHyperparams {
    /// DP concentration `α`.
    pub alpha: f64,
    /// Prior mean `ξ`.
    pub xi: Vec<f64>,
    /// Prior precision scale `b` of the mean.
    pub b: f64,
    /// Wishart degrees of freedom `ν`.
    pub nu: f64,
    /// Prior scale matrix `Ψ`; diagonal in diagonal mode.
    pub psi: Covariance,
    /// Truncation level `K`.
    pub truncation: usize,
    pub covariance_mode: CovarianceMode,
}

impl DpgmHyperparams {
    /// Empirical-Bayes defaults: `α = 1`, `b = 1`, `ν = d`, `ξ` the sample
    /// mean and `Ψ` the sample covariance (divisor `n`), or its diagonal in
    /// diagonal mode. Zero variances are replaced with [`MIN_VARIANCE`].
    pub fn empirical(data: &Matrix, mode: CovarianceMode, truncation: usize) -> Result<Self> {
        let n = data.nrows();
        let d = data.ncols();
        if n == 0 || d == 0 {
            return Err(OedpmError::usage("cannot fit a mixture to an empty matrix"));
        }
        let xi = data.column_means();
        let mut cov = Matrix::zeros(d, d);
        for row in data.rows() {
            for a in 0..d {
                let da = row[a] - xi[a];
                for b in a..d {
                    cov[(a, b)] += da * (row[b] - xi[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / n as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
            if cov[(a, a)] < 1e-12 {
                cov[(a, a)] = MIN_VARIANCE;
            }
        }
        let psi = match mode {
            CovarianceMode::Diagonal => Covariance::Diagonal(cov.diagonal()),
            CovarianceMode::Full => {
                let mut psi = Covariance::Full(cov);
                // Collinear columns leave the sample covariance singular.
                let base = mean(&psi.diagonal()) * RIDGE_FACTOR;
                let mut jitter = base;
                while psi.factor().is_err() {
                    psi.add_to_diagonal(jitter);
                    jitter *= 10.0;
                    if !jitter.is_finite() {
                        return Err(OedpmError::Numeric(
                            "empirical covariance cannot be regularized".into(),
                        ));
                    }
                }
                psi
            }
        };
        Ok(Self {
            alpha: 1.0,
            xi,
            b: 1.0,
            nu: d as f64,
            psi,
            truncation,
            covariance_mode: mode,
        })
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if !(self.alpha > 0.0) {
            return Err(OedpmError::config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.b > 0.0) {
            return Err(OedpmError::config(format!("b must be > 0, got {}", self.b)));
        }
        if !(self.nu >= d as f64) {
            return Err(OedpmError::config(format!(
                "nu must be at least the dimension {d}, got {}",
                self.nu
            )));
        }
        if self.truncation == 0 {
            return Err(OedpmError::config("truncation must be at least 1"));
        }
        if self.psi.dim() != d {
            return Err(OedpmError::DimensionMismatch {
                expected: d,
                found: self.psi.dim(),
            });
        }
        match (&self.psi, self.covariance_mode) {
            (Covariance::Full(_), CovarianceMode::Diagonal) => {
                return Err(OedpmError::config("diagonal mode needs a diagonal prior scale"))
            }
            (Covariance::Diagonal(_), CovarianceMode::Full) => {
                return Err(OedpmError::config("full mode needs a dense prior scale"))
            }
            _ => {}
        }
        self.psi.factor()?;
        Ok(())
    }

    /// `1e-6 · mean(diag Ψ)`.
    pub fn ridge(&self) -> f64 {
        RIDGE_FACTOR * mean(&self.psi.diagonal())
    }

    /// `Ψ` plus the ridge: the prior scale actually used by the updates.
    pub(crate) fn effective_psi(&self) -> Covariance {
        let mut psi = self.psi.clone();
        psi.add_to_diagonal(self.ridge());
        psi
    }
}

/// All variational parameters of one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// `π̃`, `n × K`, rows on the simplex.
    pub responsibilities: Matrix,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    /// `ξ̃`, `K × d`.
    pub xi_tilde: Matrix,
    pub b_tilde: Vec<f64>,
    pub nu_tilde: Vec<f64>,
    pub psi_tilde: Vec<Covariance>,
    /// Completed CAVI sweeps.
    pub iterations: usize,
    /// ELBO after the responsibility step of every sweep.
    pub elbo_history: Vec<f64>,
    pub converged: bool,
}

/// Point estimates extracted from a converged state.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureEstimate {
    /// `π̂_k`; sums to at most one over the truncation.
    pub weights: Vec<f64>,
    /// `μ̂_k = ξ̃_k`, `K × d`.
    pub means: Matrix,
    /// `Σ̂_k = Ψ̃_k / ν̃_k`.
    pub covariances: Vec<Covariance>,
    /// `ẑ_i`, zero-based component index.
    pub assignments: Vec<usize>,
    /// `K̂`, number of components with at least one assigned instance.
    pub active_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative ELBO change below which the fit stops.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub state: VariationalState,
    pub estimate: MixtureEstimate,
}

/// Sufficient statistics of the responsibilities.
struct Stats {
    counts: Vec<f64>,
    /// Responsibility-weighted means `w̃_k`; rows with zero count are left at zero.
    means: Matrix,
}

fn check_data(data: &Matrix, hyper: &DpgmHyperparams) -> Result<()> {
    if data.nrows() == 0 {
        return Err(OedpmError::usage("cannot fit a mixture to zero instances"));
    }
    if data.ncols() != hyper.dim() {
        return Err(OedpmError::DimensionMismatch {
            expected: hyper.dim(),
            found: data.ncols(),
        });
    }
    Ok(())
}

impl VariationalState {
    /// Seeded random hard assignments: `min(K, n)` distinct instances are
    /// drawn as seeds and every instance goes to the component of its nearest
    /// seed (ties to the smaller index). Each row then gets Dirichlet(1)
    /// jitter of weight [`INIT_JITTER`] and is renormalized, followed by one
    /// stick-breaking and one NIW update.
    pub fn init<R: Rng + ?Sized>(
        data: &Matrix,
        hyper: &DpgmHyperparams,
        rng: &mut R,
    ) -> Result<Self> {
        check_data(data, hyper)?;
        hyper.validate()?;
        let (n, d, k) = (data.nrows(), data.ncols(), hyper.truncation);
        if hyper.covariance_mode == CovarianceMode::Full && d > n {
            return Err(OedpmError::config(format!(
                "full covariance needs d <= n (d = {d}, n = {n}); use diagonal mode"
            )));
        }

        let seeds = index::sample(rng, n, k.min(n)).into_vec();
        let mut resp = Matrix::zeros(n, k);
        let mut jitter = vec![0.0; k];
        for i in 0..n {
            let x = data.row(i);
            let mut hard = 0;
            let mut best = f64::INFINITY;
            for (c, &s) in seeds.iter().enumerate() {
                let dist: f64 = x.iter().zip(data.row(s)).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best {
                    best = dist;
                    hard = c;
                }
            }
            for j in jitter.iter_mut() {
                *j = Exp1.sample(rng);
            }
            let total: f64 = jitter.iter().sum();
            let row = resp.row_mut(i);
            for (c, (r, e)) in row.iter_mut().zip(&jitter).enumerate() {
                let onehot = if c == hard { 1.0 } else { 0.0 };
                *r = onehot + INIT_JITTER * e / total;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|r| *r /= s);
        }

        let mut state = Self {
            responsibilities: resp,
            gamma1: vec![1.0; k],
            gamma2: vec![hyper.alpha; k],
            xi_tilde: Matrix::zeros(k, d),
            b_tilde: vec![hyper.b; k],
            nu_tilde: vec![hyper.nu; k],
            psi_tilde: vec![hyper.effective_psi(); k],
            iterations: 0,
            elbo_history: Vec::new(),
            converged: false,
        };
        state.update_stick_breaking(hyper)?;
        state.update_niw(data, hyper)?;
        Ok(state)
    }

    pub fn truncation(&self) -> usize {
        self.gamma1.len()
    }

    pub fn dim(&self) -> usize {
        self.xi_tilde.ncols()
    }

    /// `ñ_k = Σ_i π̃_ik`.
    pub fn counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.truncation()];
        for row in self.responsibilities.rows() {
            for (c, r) in counts.iter_mut().zip(row) {
                *c += r;
            }
        }
        counts
    }

    fn stats(&self, data: &Matrix) -> Stats {
        let (k, d) = (self.truncation(), data.ncols());
        let counts = self.counts();
        let mut means = Matrix::zeros(k, d);
        for (x, r) in data.rows().zip(self.responsibilities.rows()) {
            for (c, &w) in r.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (m, xv) in means.row_mut(c).iter_mut().zip(x) {
                    *m += w * xv;
                }
            }
        }
        for (c, &nk) in counts.iter().enumerate() {
            if nk > 0.0 {
                means.row_mut(c).iter_mut().for_each(|m| *m /= nk);
            }
        }
        Stats { counts, means }
    }

    /// `E_q[ln π_k]` under the stick-breaking posterior.
    pub fn expected_log_weights(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.truncation());
        let mut remaining = 0.0;
        for (&g1, &g2) in self.gamma1.iter().zip(&self.gamma2) {
            let total = digamma(g1 + g2)?;
            out.push(digamma(g1)? - total + remaining);
            remaining += digamma(g2)? - total;
        }
        Ok(out)
    }

    /// `E_q[ln |Σ_k⁻¹|] = Σ_j ψ((ν̃_k + 1 − j)/2) + d ln 2 − ln |Ψ̃_k|`.
    pub(crate) fn expected_log_det_precision(&self, k: usize, factor: &Factor) -> Result<f64> {
        let d = self.dim();
        let nu = self.nu_tilde[k];
        let mut s = d as f64 * std::f64::consts::LN_2 - factor.log_det();
        for j in 1..=d {
            s += digamma((nu + 1.0 - j as f64) / 2.0)?;
        }
        Ok(s)
    }

    pub(crate) fn factors(&self) -> Result<Vec<Factor>> {
        self.psi_tilde
            .iter()
            .enumerate()
            .map(|(k, p)| {
                p.factor().map_err(|e| match e {
                    OedpmError::NotPositiveDefinite { pivot } => OedpmError::Numeric(format!(
                        "scale matrix of component {k} is not positive definite (pivot {pivot})"
                    )),
                    other => other,
                })
            })
            .collect()
    }

    /// Recomputes every `π̃_ik` from the current global parameters.
    ///
    /// Returns `Σ_i ln Σ_k ρ_ik`, where `ρ_ik` are the unnormalized
    /// responsibilities including all Gaussian normalizing constants. At the
    /// resulting state this equals the data, assignment and `q(z)` entropy
    /// part of the ELBO.
    pub fn update_responsibilities(
        &mut self,
        data: &Matrix,
        hyper: &DpgmHyperparams,
    ) -> Result<f64> {
        check_data(data, hyper)?;
        let k = self.truncation();
        let d = self.dim() as f64;
        let log_weights = self.expected_log_weights()?;
        let factors = self.factors()?;
        let mut offsets = Vec::with_capacity(k);
        for c in 0..k {
            let ln_lambda = self.expected_log_det_precision(c, &factors[c])?;
            offsets.push(
                log_weights[c] + 0.5 * ln_lambda - 0.5 * d * LN_2PI - 0.5 * d / self.b_tilde[c],
            );
        }

        let mut log_rho = vec![0.0; k];
        let mut total = 0.0;
        for (i, x) in data.rows().enumerate() {
            for c in 0..k {
                let maha = factors[c].mahalanobis_sq(x, self.xi_tilde.row(c));
                log_rho[c] = offsets[c] - 0.5 * self.nu_tilde[c] * maha;
            }
            let lse = log_sum_exp_unchecked(&log_rho);
            if !lse.is_finite() {
                return Err(OedpmError::Numeric(format!(
                    "responsibilities of instance {i} are not finite"
                )));
            }
            total += lse;
            let row = self.responsibilities.row_mut(i);
            let mut s = 0.0;
            for (r, l) in row.iter_mut().zip(&log_rho) {
                *r = (l - lse).exp();
                s += *r;
            }
            row.iter_mut().for_each(|r| *r /= s);
        }
        Ok(total)
    }

    /// `γ̃_k1 = 1 + ñ_k`, `γ̃_k2 = α + Σ_{j>k} ñ_j`.
    pub fn update_stick_breaking(&mut self, hyper: &DpgmHyperparams) -> Result<()> {
        let counts = self.counts();
        let mut tail = 0.0;
        for c in (0..counts.len()).rev() {
            self.gamma1[c] = 1.0 + counts[c];
            self.gamma2[c] = hyper.alpha + tail;
            tail += counts[c];
        }
        Ok(())
    }

    /// Conjugate normal-inverse-Wishart update of every component.
    pub fn update_niw(&mut self, data: &Matrix, hyper: &DpgmHyperparams) -> Result<()> {
        check_data(data, hyper)?;
        let Stats { counts, means } = self.stats(data);
        let psi = hyper.effective_psi();
        let d = data.ncols();
        let b = hyper.b;

        for (c, &nk) in counts.iter().enumerate() {
            let w = means.row(c);
            let shrink = b * nk / (b + nk);
            {
                let xi_row = self.xi_tilde.row_mut(c);
                for ((x, &wj), &pj) in xi_row.iter_mut().zip(w).zip(&hyper.xi) {
                    *x = (b * pj + nk * wj) / (b + nk);
                }
            }
            self.b_tilde[c] = b + nk;
            self.nu_tilde[c] = hyper.nu + nk;

            let mut scale = psi.clone();
            match &mut scale {
                Covariance::Diagonal(diag) => {
                    for (x, r) in data.rows().zip(self.responsibilities.rows()) {
                        let rc = r[c];
                        if rc == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            let dv = x[j] - w[j];
                            diag[j] += rc * dv * dv;
                        }
                    }
                    for j in 0..d {
                        let dv = w[j] - hyper.xi[j];
                        diag[j] += shrink * dv * dv;
                    }
                }
                Covariance::Full(m) => {
                    let mut dv = vec![0.0; d];
                    for (x, r) in data.rows().zip(self.responsibilities.rows()) {
                        let rc = r[c];
                        if rc == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            dv[j] = x[j] - w[j];
                        }
                        for a in 0..d {
                            let ra = rc * dv[a];
                            for bb in a..d {
                                m[(a, bb)] += ra * dv[bb];
                            }
                        }
                    }
                    for j in 0..d {
                        dv[j] = w[j] - hyper.xi[j];
                    }
                    for a in 0..d {
                        for bb in a..d {
                            m[(a, bb)] += shrink * dv[a] * dv[bb];
                        }
                    }
                    for a in 0..d {
                        for bb in 0..a {
                            m[(a, bb)] = m[(bb, a)];
                        }
                    }
                }
            }
            self.psi_tilde[c] = scale;
        }
        Ok(())
    }

    /// One responsibility → stick-breaking → NIW sweep. Returns the ELBO at
    /// the state reached right after the responsibility step.
    pub fn sweep(&mut self, data: &Matrix, hyper: &DpgmHyperparams) -> Result<f64> {
        let data_part = self.update_responsibilities(data, hyper)?;
        let elbo = data_part + elbo::global_terms(self, hyper)?;
        self.update_stick_breaking(hyper)?;
        self.update_niw(data, hyper)?;
        self.iterations += 1;
        Ok(elbo)
    }
}

/// Point estimates: `π̂` from the stick-breaking means, `ẑ` by argmax (ties
/// to the smallest index), `μ̂ = ξ̃`, `Σ̂ = Ψ̃ / ν̃`.
pub fn point_estimates(state: &VariationalState) -> MixtureEstimate {
    let k = state.truncation();
    let mut weights = Vec::with_capacity(k);
    let mut log_remaining = 0.0;
    for (&g1, &g2) in state.gamma1.iter().zip(&state.gamma2) {
        let log_total = (g1 + g2).ln();
        weights.push((g1.ln() - log_total + log_remaining).exp());
        log_remaining += g2.ln() - log_total;
    }

    let assignments: Vec<usize> = state
        .responsibilities
        .rows()
        .map(|row| {
            let mut best = 0;
            for (c, &r) in row.iter().enumerate() {
                if r > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let mut used = vec![false; k];
    assignments.iter().for_each(|&z| used[z] = true);
    let active_count = used.iter().filter(|u| **u).count();

    let covariances = state
        .psi_tilde
        .iter()
        .zip(&state.nu_tilde)
        .map(|(p, &nu)| p.scaled(nu))
        .collect();

    MixtureEstimate {
        weights,
        means: state.xi_tilde.clone(),
        covariances,
        assignments,
        active_count,
    }
}

/// Runs CAVI until the relative ELBO change drops below `options.tol` or
/// `options.max_iter` sweeps have run. Hitting the iteration cap is not an
/// error; `state.converged` records which case occurred.
pub fn fit<R: Rng + ?Sized>(
    data: &Matrix,
    hyper: &DpgmHyperparams,
    rng: &mut R,
    options: FitOptions,
) -> Result<FitOutcome> {
    let mut state = VariationalState::init(data, hyper, rng)?;
    let mut previous: Option<f64> = None;
    for _ in 0..options.max_iter {
        let elbo = state.sweep(data, hyper)?;
        state.elbo_history.push(elbo);
        if let Some(prev) = previous {
            if (elbo - prev).abs() < options.tol * prev.abs() {
                state.converged = true;
                break;
            }
        }
        previous = Some(elbo);
    }
    let estimate = point_estimates(&state);
    Ok(FitOutcome { state, estimate })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests;
