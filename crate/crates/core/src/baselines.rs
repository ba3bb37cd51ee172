//! Comparison models: a Gaussian-emission HMM and a static (memoryless)
//! scale-mixture classifier.

use crate::data::{EegSequence, LabeledDataset, StateSequence};
use crate::em::{m_step_cov, m_step_mean};
use crate::emission::EmissionParams;
use crate::error::{Error, Result};
use crate::inference::{
    filter_from_log_likelihoods, posterior_from_log_likelihoods, LogLikelihoods, PosteriorSequence,
};
use crate::linalg::{self, Cholesky};
use crate::markov::TransitionModel;

/// `N(mu, Sigma)` with the factor of `Sigma` cached.
#[derive(Debug, Clone)]
pub struct GaussianEmissionParams {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    factor: Cholesky,
}

impl PartialEq for GaussianEmissionParams {
    fn eq(&self, other: &Self) -> bool {
        self.mu == other.mu && self.sigma == other.sigma
    }
}

impl GaussianEmissionParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        // Reuse the Student-t validation and jitter policy; nu plays no part.
        let t = EmissionParams::new(mu, sigma, 1.0)?;
        Ok(GaussianEmissionParams {
            mu: t.mu().to_vec(),
            sigma: t.sigma().to_vec(),
            factor: t.factor().clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut diff = [0.0; 64];
        let diff = if d <= 64 {
            &mut diff[..d]
        } else {
            return self.log_density_heap(x);
        };
        for i in 0..d {
            diff[i] = x[i] - self.mu[i];
        }
        self.finish(self.factor.mahalanobis_sq(diff))
    }

    fn log_density_heap(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        self.finish(self.factor.mahalanobis_sq(&diff))
    }

    fn finish(&self, m: f64) -> f64 {
        let d = self.dim() as f64;
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.factor.log_det() + m)
    }
}

/// Maximum-likelihood mean and biased covariance.
pub fn fit_gaussian_state(samples: &[&[f64]]) -> Result<GaussianEmissionParams> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let ones = vec![1.0; samples.len()];
    let mu = m_step_mean(samples, &ones)?;
    let sigma = m_step_cov(samples, &ones, &mu)?;
    GaussianEmissionParams::new(mu, sigma)
}

pub fn fit_gaussian_states(data: &LabeledDataset) -> Result<Vec<GaussianEmissionParams>> {
    (0..data.num_states)
        .map(|k| {
            let part = data.samples_for_state(k);
            if part.is_empty() {
                return Err(Error::EmptyState(Some(k + 1)));
            }
            fit_gaussian_state(&part)
        })
        .collect()
}

/// The same Markov chain with Gaussian emissions.
#[derive(Debug, Clone, PartialEq)]
pub struct GhmmModel {
    transition: TransitionModel,
    emissions: Vec<GaussianEmissionParams>,
}

impl GhmmModel {
    pub fn new(transition: TransitionModel, emissions: Vec<GaussianEmissionParams>) -> Result<Self> {
        if emissions.len() != transition.num_states() {
            return Err(Error::DimensionMismatch {
                expected: transition.num_states(),
                got: emissions.len(),
            });
        }
        let dim = emissions[0].dim();
        if let Some(e) = emissions.iter().find(|e| e.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
        Ok(GhmmModel { transition, emissions })
    }

    pub fn transition(&self) -> &TransitionModel {
        &self.transition
    }

    pub fn emissions(&self) -> &[GaussianEmissionParams] {
        &self.emissions
    }

    pub fn num_states(&self) -> usize {
        self.emissions.len()
    }

    pub fn dim(&self) -> usize {
        self.emissions[0].dim()
    }

    pub fn log_likelihoods(&self, x: &EegSequence) -> Result<LogLikelihoods> {
        LogLikelihoods::from_fn(x, self.dim(), self.num_states(), |k, row| {
            self.emissions[k].log_density(row)
        })
    }
}

pub fn ghmm_posterior(model: &GhmmModel, x: &EegSequence) -> Result<PosteriorSequence> {
    posterior_from_log_likelihoods(&model.transition, &model.log_likelihoods(x)?)
}

pub fn ghmm_filter(model: &GhmmModel, x: &EegSequence) -> Result<PosteriorSequence> {
    filter_from_log_likelihoods(&model.transition, &model.log_likelihoods(x)?)
}

/// Fixed class proportions `p(z_t = k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticPrior {
    class_proportions: Vec<f64>,
}

impl StaticPrior {
    pub fn new(class_proportions: Vec<f64>) -> Result<Self> {
        if class_proportions.is_empty()
            || class_proportions.iter().any(|p| !(0.0..=1.0).contains(p))
            || (class_proportions.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidParameter(format!(
                "class proportions {class_proportions:?} are not a distribution"
            )));
        }
        Ok(StaticPrior { class_proportions })
    }

    /// Proportion of samples carrying each label.
    pub fn from_labels(labels: &[StateSequence], num_states: usize) -> Result<Self> {
        let mut counts = vec![0u64; num_states];
        for seq in labels {
            seq.validate(num_states)?;
            for &z in &seq.0 {
                counts[z] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidParameter("no labels to estimate proportions from".into()));
        }
        Self::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn class_proportions(&self) -> &[f64] {
        &self.class_proportions
    }
}

/// Row-wise Bayes rule with no temporal coupling. The returned log-evidence
/// is `sum_t ln sum_k p(z_t = k) p(x_t | k)`.
pub fn smm_static_posterior(
    emissions: &[EmissionParams],
    prior: &StaticPrior,
    x: &EegSequence,
) -> Result<PosteriorSequence> {
    let k = emissions.len();
    if prior.class_proportions.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: prior.class_proportions.len(),
        });
    }
    let dim = emissions.first().ok_or(Error::EmptyState(None))?.dim();
    let ll = LogLikelihoods::from_fn(x, dim, k, |s, row| {
        let e = &emissions[s];
        e.log_density_at_distance(e.distance_sq(row))
    })?;
    let log_prior: Vec<f64> = prior.class_proportions.iter().map(|p| p.ln()).collect();
    let mut gamma = Vec::with_capacity(ll.len() * k);
    let mut evidence = linalg::CompensatedSum::default();
    let mut joint = vec![0.0; k];
    for t in 0..ll.len() {
        let row = ll.row(t);
        for s in 0..k {
            joint[s] = if log_prior[s] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_prior[s] + row[s]
            };
        }
        let max = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "every state has zero probability at sample {t}"
            )));
        }
        let total: f64 = joint.iter().map(|j| (j - max).exp()).sum();
        gamma.extend(joint.iter().map(|j| (j - max).exp() / total));
        evidence.add(max + total.ln());
    }
    PosteriorSequence::new(gamma, k, evidence.value())
}
