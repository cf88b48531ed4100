//! The outlier ensemble: subsampled, randomly projected mixture fits, each
//! pruned to its inlier components and paired with a log-likelihood
//! threshold. Instances are flagged by majority vote.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Metrics;
use crate::dpgm::{self, CovarianceMode, DpgmHyperparams, FitOptions, MixtureEstimate};
use crate::error::{OedpmError, Result};
use crate::math::{quantile_sorted, Covariance, GaussianDensity, Matrix};
use crate::projection::{sample_subspace_dim, ProjectionMatrix};
use crate::seed::{component_rng, component_seed};

pub const DEFAULT_ENSEMBLE_SIZE: usize = 100;
pub const DEFAULT_CONTAMINATION: f64 = 0.1;

/// How each member turns its training log-likelihoods into a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ThresholdRule {
    /// The `φ`-quantile of the member's subsample log-likelihoods.
    Quantile { contamination: f64 },
    /// `Q1 − 1.5·IQR` of the member's subsample log-likelihoods.
    Iqr,
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Quantile {
            contamination: DEFAULT_CONTAMINATION,
        }
    }
}

impl ThresholdRule {
    pub fn quantile(contamination: f64) -> Self {
        ThresholdRule::Quantile { contamination }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdRule::Quantile { contamination } if !(contamination > 0.0 && contamination < 1.0) => {
                Err(OedpmError::config(format!(
                    "contamination must lie in (0, 1), got {contamination}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Threshold for ascending-sorted log-likelihoods.
    pub fn threshold(&self, sorted_loglik: &[f64]) -> Result<f64> {
        match *self {
            ThresholdRule::Quantile { contamination } => quantile_sorted(sorted_loglik, contamination),
            ThresholdRule::Iqr => {
                let q1 = quantile_sorted(sorted_loglik, 0.25)?;
                let q3 = quantile_sorted(sorted_loglik, 0.75)?;
                Ok(q1 - 1.5 * (q3 - q1))
            }
        }
    }
}

impl std::fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdRule::Quantile { contamination } => write!(f, "{contamination}"),
            ThresholdRule::Iqr => f.write_str("iqr"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Number of members `M`.
    pub ensemble_size: usize,
    pub threshold: ThresholdRule,
    pub covariance_mode: CovarianceMode,
    /// Truncation level `K` of every mixture.
    pub truncation: usize,
    pub master_seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        let fit = FitOptions::default();
        Self {
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
            threshold: ThresholdRule::default(),
            covariance_mode: CovarianceMode::Diagonal,
            truncation: dpgm::DEFAULT_TRUNCATION,
            master_seed: 0,
            max_iter: fit.max_iter,
            tol: fit.tol,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(OedpmError::config("ensemble size must be at least 1"));
        }
        if self.truncation == 0 {
            return Err(OedpmError::config("truncation must be at least 1"));
        }
        if self.max_iter == 0 {
            return Err(OedpmError::config("max_iter must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(OedpmError::config("tol must be non-negative"));
        }
        self.threshold.validate()
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

/// Draws a subsample size uniformly from `[min(N, 50), min(N, 1000)]`.
pub fn sample_subsample_size<R: Rng + ?Sized>(n: usize, rng: &mut R) -> usize {
    rng.random_range(n.min(50)..=n.min(1000))
}

/// Retained component indices and their renormalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Pruned {
    pub retained: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Keeps every component with `π̂_k ≥ 1/K̂` plus the heaviest one, then
/// renormalizes the kept weights to sum to one.
pub fn prune_components(estimate: &MixtureEstimate) -> Pruned {
    prune_weights(&estimate.weights, estimate.active_count)
}

/// [`prune_components`] on raw weights.
pub fn prune_weights(weights: &[f64], active_count: usize) -> Pruned {
    let cutoff = 1.0 / active_count.max(1) as f64;
    let mut argmax = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > weights[argmax] {
            argmax = k;
        }
    }
    let retained: Vec<usize> = (0..weights.len())
        .filter(|&k| k == argmax || weights[k] >= cutoff)
        .collect();
    let total: f64 = retained.iter().map(|&k| weights[k]).sum();
    let weights = retained.iter().map(|&k| weights[k] / total).collect();
    Pruned { retained, weights }
}

/// The inlier mixture kept by one ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedMixture {
    retained: Vec<usize>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    covariances: Vec<Covariance>,
    densities: Vec<GaussianDensity>,
}

impl PrunedMixture {
    /// Builds the mixture from `estimate`, keeping the components in `pruned`.
    pub fn new(estimate: &MixtureEstimate, pruned: Pruned) -> Result<Self> {
        let mut covariances = Vec::with_capacity(pruned.retained.len());
        let mut densities = Vec::with_capacity(pruned.retained.len());
        for &k in &pruned.retained {
            let cov = estimate.covariances[k].clone();
            densities.push(GaussianDensity::new(estimate.means.row(k).to_vec(), &cov)?);
            covariances.push(cov);
        }
        Ok(Self {
            log_weights: pruned.weights.iter().map(|w| w.ln()).collect(),
            retained: pruned.retained,
            weights: pruned.weights,
            covariances,
            densities,
        })
    }

    /// Mixture from explicit parts; weights are renormalized.
    pub fn from_parts(means: &[Vec<f64>], covariances: Vec<Covariance>, weights: &[f64]) -> Result<Self> {
        if means.is_empty() || means.len() != covariances.len() || means.len() != weights.len() {
            return Err(OedpmError::usage(
                "mixture needs matching non-empty means, covariances and weights",
            ));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(OedpmError::usage("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let densities = means
            .iter()
            .zip(&covariances)
            .map(|(m, c)| GaussianDensity::new(m.clone(), c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            retained: (0..means.len()).collect(),
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            covariances,
            densities,
        })
    }

    /// Indices `K*` of the kept components within the fitted truncation.
    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> impl Iterator<Item = &[f64]> {
        self.densities.iter().map(|d| d.mean())
    }

    pub fn covariances(&self) -> &[Covariance] {
        &self.covariances
    }

    pub fn dim(&self) -> usize {
        self.densities[0].dim()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(OedpmError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(self.log_density_unchecked(x))
    }

    fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        if self.densities.len() == 1 {
            return self.log_weights[0] + self.densities[0].log_density_unchecked(x);
        }
        let mut terms = [0.0; 32];
        let mut heap;
        let buf: &mut [f64] = if self.densities.len() <= terms.len() {
            &mut terms[..self.densities.len()]
        } else {
            heap = vec![0.0; self.densities.len()];
            &mut heap
        };
        for ((t, d), lw) in buf.iter_mut().zip(&self.densities).zip(&self.log_weights) {
            *t = lw + d.log_density_unchecked(x);
        }
        crate::math::log_sum_exp_unchecked(buf)
    }
}

/// One ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleComponent {
    pub projection: ProjectionMatrix,
    /// Rows of the training set used for the fit, ascending.
    pub subsample_indices: Vec<usize>,
    pub mixture: PrunedMixture,
    /// `T_m`, in log-likelihood units.
    pub threshold: f64,
    pub component_seed: u64,
    /// Whether the underlying variational fit met its tolerance.
    pub converged: bool,
    /// Log-likelihoods of the member's own subsample, ascending.
    training_loglik: Vec<f64>,
}

impl EnsembleComponent {
    /// Assembles a member from parts, computing its threshold from the
    /// log-likelihoods of `fitted` (already projected) under `rule`.
    pub fn from_parts(
        projection: ProjectionMatrix,
        subsample_indices: Vec<usize>,
        mixture: PrunedMixture,
        fitted: &Matrix,
        rule: ThresholdRule,
        component_seed: u64,
    ) -> Result<Self> {
        if mixture.dim() != projection.target_dim() || fitted.ncols() != projection.target_dim() {
            return Err(OedpmError::DimensionMismatch {
                expected: projection.target_dim(),
                found: mixture.dim(),
            });
        }
        let mut training_loglik: Vec<f64> = fitted.rows().map(|x| mixture.log_density_unchecked(x)).collect();
        training_loglik.sort_by(f64::total_cmp);
        let threshold = rule.threshold(&training_loglik)?;
        Ok(Self {
            projection,
            subsample_indices,
            mixture,
            threshold,
            component_seed,
            converged: true,
            training_loglik,
        })
    }

    /// Subspace dimension `d_m`.
    pub fn dim(&self) -> usize {
        self.projection.target_dim()
    }

    /// Subsample size `n_m`.
    pub fn subsample_size(&self) -> usize {
        self.subsample_indices.len()
    }

    /// Log-likelihoods of the fitted subsample, ascending.
    pub fn training_loglik(&self) -> &[f64] {
        &self.training_loglik
    }

    /// Threshold this member would use under `rule`; the fit is unchanged.
    pub fn threshold_for(&self, rule: ThresholdRule) -> Result<f64> {
        rule.threshold(&self.training_loglik)
    }

    /// Copy of this member with its threshold recomputed under `rule`.
    pub fn with_threshold(&self, rule: ThresholdRule) -> Result<Self> {
        Ok(Self {
            threshold: self.threshold_for(rule)?,
            ..self.clone()
        })
    }

    /// `log p̂_m(x)` for a full-dimensional (unprojected) row.
    pub fn log_density_raw(&self, x: &[f64], buf: &mut Vec<f64>) -> f64 {
        buf.resize(self.dim(), 0.0);
        self.projection.project_row_into(x, buf);
        self.mixture.log_density_unchecked(buf)
    }
}

/// `log p̂_m(x)` for an already projected `x` of dimension `d_m`.
pub fn component_log_density(x: &[f64], component: &EnsembleComponent) -> Result<f64> {
    component.mixture.log_density(x)
}

/// Builds ensemble member `m` from the standardized training matrix.
pub fn build_component(train: &Matrix, config: &EnsembleConfig, m: usize) -> Result<EnsembleComponent> {
    let (n, p) = (train.nrows(), train.ncols());
    if n == 0 || p == 0 {
        return Err(OedpmError::usage("training data must have at least one row and column"));
    }
    let seed = component_seed(config.master_seed, m as u64);
    let mut rng = component_rng(config.master_seed, m as u64);

    let d = sample_subspace_dim(p, &mut rng)?;
    let projection = ProjectionMatrix::generate(p, d, rng.random())?;
    let n_m = sample_subsample_size(n, &mut rng);
    let mut indices = index::sample(&mut rng, n, n_m).into_vec();
    indices.sort_unstable();

    let fitted = projection.project(&train.select_rows(&indices)?)?;
    let hyper = DpgmHyperparams::empirical(&fitted, config.covariance_mode, config.truncation)?;
    let outcome = dpgm::fit(&fitted, &hyper, &mut rng, config.fit_options())?;
    let pruned = prune_components(&outcome.estimate);
    let mixture = PrunedMixture::new(&outcome.estimate, pruned)?;

    let mut component = EnsembleComponent::from_parts(projection, indices, mixture, &fitted, config.threshold, seed)?;
    component.converged = outcome.state.converged;
    Ok(component)
}

/// Builds all `M` members, in parallel on the current rayon pool. The result
/// is ordered by member index and does not depend on the number of workers.
/// The first failing member (by index) aborts the run.
pub fn fit_detector(train: &Matrix, config: &EnsembleConfig) -> Result<Vec<EnsembleComponent>> {
    config.validate()?;
    let built: Vec<Result<EnsembleComponent>> = (0..config.ensemble_size)
        .into_par_iter()
        .map(|m| {
            build_component(train, config, m).map_err(|e| OedpmError::Component {
                index: m,
                source: Box::new(e),
            })
        })
        .collect();
    built.into_iter().collect()
}

/// `N × M` matrix of `log p̂_m(x_i)` for raw (unprojected) rows.
pub fn log_density_table(test: &Matrix, components: &[EnsembleComponent]) -> Result<Matrix> {
    check_components(test, components)?;
    let m = components.len();
    let rows: Vec<f64> = test
        .as_slice()
        .par_chunks(test.ncols())
        .flat_map_iter(|x| {
            let mut buf = Vec::new();
            components
                .iter()
                .map(move |c| c.log_density_raw(x, &mut buf))
                .collect::<Vec<_>>()
        })
        .collect();
    Matrix::new(test.nrows(), m, rows)
}

/// Per-instance vote counts: how many members have `log p̂_m(x_i) < T_m`.
pub fn vote_counts(table: &Matrix, thresholds: &[f64]) -> Result<Vec<usize>> {
    if table.ncols() != thresholds.len() {
        return Err(OedpmError::DimensionMismatch {
            expected: thresholds.len(),
            found: table.ncols(),
        });
    }
    Ok(table
        .rows()
        .map(|row| row.iter().zip(thresholds).filter(|(l, t)| l < t).count())
        .collect())
}

/// Scores every row of `test` against the ensemble.
pub fn score(test: &Matrix, components: &[EnsembleComponent]) -> Result<DetectionReport> {
    let table = log_density_table(test, components)?;
    let thresholds: Vec<f64> = components.iter().map(|c| c.threshold).collect();
    let votes = vote_counts(&table, &thresholds)?;
    Ok(DetectionReport::from_votes(&votes, thresholds))
}

fn check_components(test: &Matrix, components: &[EnsembleComponent]) -> Result<()> {
    if components.is_empty() {
        return Err(OedpmError::usage("ensemble has no components"));
    }
    for c in components {
        if c.projection.source_dim() != test.ncols() {
            return Err(OedpmError::DimensionMismatch {
                expected: c.projection.source_dim(),
                found: test.ncols(),
            });
        }
    }
    Ok(())
}

/// Outlier scores and memberships for a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// `O_i`, the fraction of members voting "outlier".
    pub scores: Vec<f64>,
    /// `I_i = 1{O_i > 1/2}`.
    pub memberships: Vec<u8>,
    /// `T_m` per member.
    pub thresholds: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<EnsembleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

impl DetectionReport {
    /// Report from per-instance vote counts out of `thresholds.len()` members.
    pub fn from_votes(votes: &[usize], thresholds: Vec<f64>) -> Self {
        let m = thresholds.len();
        let scores: Vec<f64> = votes.iter().map(|&v| v as f64 / m as f64).collect();
        let memberships = votes.iter().map(|&v| u8::from(2 * v > m)).collect();
        Self {
            scores,
            memberships,
            thresholds,
            config: None,
            metrics: None,
        }
    }

    pub fn ensemble_size(&self) -> usize {
        self.thresholds.len()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Fraction of instances flagged as outliers.
    pub fn outlier_fraction(&self) -> f64 {
        if self.memberships.is_empty() {
            return 0.0;
        }
        self.memberships.iter().map(|&b| b as usize).sum::<usize>() as f64 / self.memberships.len() as f64
    }
}
