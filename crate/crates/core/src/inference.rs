//! Forward-backward state posteriors, forward-only filtering, and an
//! exhaustive-enumeration reference.
//!
//! Messages are kept normalized per time step, as logarithms: the forward
//! message at `t` is `ln p(z_t | x_1..t)` and the per-step normalizers
//! `ln p(x_t | x_1..t-1)` sum to `ln p(X)`. The backward message is scaled by
//! the same normalizers. Keeping both in log space means a state the filter
//! has all but ruled out can still be recovered by strong future evidence
//! without the linear-space messages underflowing or overflowing.

use crate::data::EegSequence;
use crate::emission::EmissionParams;
use crate::error::{Error, Result};
use crate::markov::TransitionModel;

/// Upper bound on `K^T` for [`brute_force_posterior`].
pub const BRUTE_FORCE_MAX_PATHS: f64 = 1e6;

/// Transition structure plus one scale-mixture emission per state.
#[derive(Debug, Clone, PartialEq)]
pub struct HmsmmModel {
    transition: TransitionModel,
    emissions: Vec<EmissionParams>,
}

impl HmsmmModel {
    pub fn new(transition: TransitionModel, emissions: Vec<EmissionParams>) -> Result<Self> {
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
        Ok(HmsmmModel { transition, emissions })
    }

    pub fn transition(&self) -> &TransitionModel {
        &self.transition
    }

    pub fn emissions(&self) -> &[EmissionParams] {
        &self.emissions
    }

    pub fn num_states(&self) -> usize {
        self.emissions.len()
    }

    pub fn dim(&self) -> usize {
        self.emissions[0].dim()
    }

    /// `T x K` row-major matrix of `ln p(x_t | z_t = k)`.
    pub fn log_likelihoods(&self, x: &EegSequence) -> Result<LogLikelihoods> {
        LogLikelihoods::from_fn(x, self.dim(), self.num_states(), |k, row| {
            let e = &self.emissions[k];
            e.log_density_at_distance(e.distance_sq(row))
        })
    }
}

/// Per-sample, per-state emission log-likelihoods, `T x K` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikelihoods {
    values: Vec<f64>,
    num_states: usize,
}

impl LogLikelihoods {
    pub fn new(values: Vec<f64>, num_states: usize) -> Result<Self> {
        if num_states == 0 || values.is_empty() || !values.len().is_multiple_of(num_states) {
            return Err(Error::InvalidParameter(
                "log-likelihood matrix must be a non-empty T x K array".into(),
            ));
        }
        if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite("emission log-likelihoods"));
        }
        Ok(LogLikelihoods { values, num_states })
    }

    /// Evaluate `f(k, x_t)` for every sample and state.
    pub fn from_fn(x: &EegSequence, dim: usize, num_states: usize, f: impl Fn(usize, &[f64]) -> f64) -> Result<Self> {
        if x.channels() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.channels(),
            });
        }
        let mut values = Vec::with_capacity(x.len() * num_states);
        for row in x.rows() {
            for k in 0..num_states {
                values.push(f(k, row));
            }
        }
        Self::new(values, num_states)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.num_states
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.num_states..(t + 1) * self.num_states]
    }
}

/// `T x K` state probabilities with the sequence log-evidence `ln p(X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSequence {
    gamma: Vec<f64>,
    num_states: usize,
    pub log_evidence: f64,
}

impl PosteriorSequence {
    pub fn new(gamma: Vec<f64>, num_states: usize, log_evidence: f64) -> Result<Self> {
        if num_states == 0 || gamma.is_empty() || !gamma.len().is_multiple_of(num_states) {
            return Err(Error::InvalidParameter(
                "posterior must be a non-empty T x K array".into(),
            ));
        }
        if gamma.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::InvalidParameter("posterior entries must lie in [0, 1]".into()));
        }
        Ok(PosteriorSequence {
            gamma,
            num_states,
            log_evidence,
        })
    }

    pub fn len(&self) -> usize {
        self.gamma.len() / self.num_states
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.gamma[t * self.num_states..(t + 1) * self.num_states]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.gamma.chunks_exact(self.num_states)
    }

    /// Probability of `state` (zero-based) at every time step.
    pub fn column(&self, state: usize) -> Vec<f64> {
        self.rows().map(|r| r[state]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.gamma
    }
}

/// Normalized forward messages.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// `ln p(z_t = k | x_1..t)`, `T x K` row-major.
    pub log_alpha: Vec<f64>,
    /// `ln p(x_t | x_1..t-1)`; sums to `ln p(X)`.
    pub log_normalizers: Vec<f64>,
    num_states: usize,
}

impl ForwardPass {
    /// Scaled alphas in linear space; every row sums to 1.
    pub fn alpha(&self) -> Vec<f64> {
        self.log_alpha.iter().map(|v| v.exp()).collect()
    }

    pub fn log_evidence(&self) -> f64 {
        self.log_normalizers.iter().sum()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
}

/// Backward messages scaled by the forward normalizers.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPass {
    /// `ln [p(x_t+1..T | z_t = k) / p(x_t+1..T | x_1..t)]`, `T x K` row-major.
    pub log_beta: Vec<f64>,
}

impl BackwardPass {
    /// Scaled betas in linear space. The last row is all ones.
    pub fn beta(&self) -> Vec<f64> {
        self.log_beta.iter().map(|v| v.exp()).collect()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_matrix(transition: &TransitionModel) -> (Vec<f64>, Vec<f64>) {
    let k = transition.num_states();
    let log_pi = transition.pi().iter().map(|p| p.ln()).collect();
    let log_a = (0..k * k).map(|i| transition.a(i / k, i % k).ln()).collect();
    (log_pi, log_a)
}

fn check_states(transition: &TransitionModel, ll: &LogLikelihoods) -> Result<()> {
    if transition.num_states() != ll.num_states() {
        return Err(Error::DimensionMismatch {
            expected: transition.num_states(),
            got: ll.num_states(),
        });
    }
    Ok(())
}

/// Forward recursion on precomputed emission log-likelihoods.
pub fn forward_from_log_likelihoods(transition: &TransitionModel, ll: &LogLikelihoods) -> Result<ForwardPass> {
    check_states(transition, ll)?;
    let k = ll.num_states();
    let t_len = ll.len();
    let (log_pi, log_a) = log_matrix(transition);
    let mut log_alpha = vec![0.0; t_len * k];
    let mut log_normalizers = Vec::with_capacity(t_len);
    let mut unnorm = vec![0.0; k];
    for t in 0..t_len {
        let emit = ll.row(t);
        for s in 0..k {
            let log_pred = if t == 0 {
                log_pi[s]
            } else {
                let prev = &log_alpha[(t - 1) * k..t * k];
                log_sum_exp((0..k).map(|j| prev[j] + log_a[j * k + s]))
            };
            unnorm[s] = if log_pred == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_pred + emit[s]
            };
        }
        let c = log_sum_exp(unnorm.iter().copied());
        if !c.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "every state has zero likelihood at sample {t}"
            )));
        }
        for s in 0..k {
            log_alpha[t * k + s] = unnorm[s] - c;
        }
        log_normalizers.push(c);
    }
    Ok(ForwardPass {
        log_alpha,
        log_normalizers,
        num_states: k,
    })
}

/// Backward recursion sharing the forward normalizers.
pub fn backward_from_log_likelihoods(
    transition: &TransitionModel,
    ll: &LogLikelihoods,
    log_normalizers: &[f64],
) -> Result<BackwardPass> {
    check_states(transition, ll)?;
    if log_normalizers.len() != ll.len() {
        return Err(Error::DimensionMismatch {
            expected: ll.len(),
            got: log_normalizers.len(),
        });
    }
    let k = ll.num_states();
    let t_len = ll.len();
    let (_, log_a) = log_matrix(transition);
    let mut log_beta = vec![0.0; t_len * k];
    let mut next = vec![0.0; k];
    for t in (0..t_len.saturating_sub(1)).rev() {
        let emit = ll.row(t + 1);
        for s in 0..k {
            next[s] = emit[s] - log_normalizers[t + 1] + log_beta[(t + 1) * k + s];
        }
        for j in 0..k {
            log_beta[t * k + j] = log_sum_exp((0..k).map(|s| log_a[j * k + s] + next[s]));
        }
    }
    Ok(BackwardPass { log_beta })
}

/// Smoothing posterior `p(z_t | X)` on precomputed log-likelihoods.
pub fn posterior_from_log_likelihoods(transition: &TransitionModel, ll: &LogLikelihoods) -> Result<PosteriorSequence> {
    let fwd = forward_from_log_likelihoods(transition, ll)?;
    let bwd = backward_from_log_likelihoods(transition, ll, &fwd.log_normalizers)?;
    let k = ll.num_states();
    let mut gamma = vec![0.0; fwd.log_alpha.len()];
    for t in 0..ll.len() {
        let row = (0..k).map(|s| fwd.log_alpha[t * k + s] + bwd.log_beta[t * k + s]);
        let norm = log_sum_exp(row.clone());
        for (s, v) in row.enumerate() {
            gamma[t * k + s] = (v - norm).exp();
        }
    }
    Ok(PosteriorSequence {
        gamma,
        num_states: k,
        log_evidence: fwd.log_evidence(),
    })
}

/// Causal filter `p(z_t | x_1..t)` on precomputed log-likelihoods.
pub fn filter_from_log_likelihoods(transition: &TransitionModel, ll: &LogLikelihoods) -> Result<PosteriorSequence> {
    let fwd = forward_from_log_likelihoods(transition, ll)?;
    Ok(PosteriorSequence {
        gamma: fwd.alpha(),
        num_states: ll.num_states(),
        log_evidence: fwd.log_evidence(),
    })
}

/// Exhaustive enumeration of all `K^T` state paths.
pub fn brute_force_from_log_likelihoods(
    transition: &TransitionModel,
    ll: &LogLikelihoods,
) -> Result<PosteriorSequence> {
    check_states(transition, ll)?;
    let k = ll.num_states();
    let t_len = ll.len();
    let paths = (k as f64).powi(t_len as i32);
    if paths > BRUTE_FORCE_MAX_PATHS {
        return Err(Error::InstanceTooLarge(paths));
    }
    let (log_pi, log_a) = log_matrix(transition);
    let paths = paths as usize;
    let path_log_prob = |mut code: usize, states: &mut [usize]| {
        for s in states.iter_mut() {
            *s = code % k;
            code /= k;
        }
        let mut lp = log_pi[states[0]] + ll.row(0)[states[0]];
        for t in 1..t_len {
            lp += log_a[states[t - 1] * k + states[t]] + ll.row(t)[states[t]];
        }
        lp
    };
    let mut states = vec![0usize; t_len];
    let mut max = f64::NEG_INFINITY;
    for code in 0..paths {
        max = max.max(path_log_prob(code, &mut states));
    }
    if !max.is_finite() {
        return Err(Error::InvalidParameter("every state path has zero probability".into()));
    }
    let mut gamma = vec![0.0; t_len * k];
    let mut total = 0.0;
    for code in 0..paths {
        let w = (path_log_prob(code, &mut states) - max).exp();
        total += w;
        for (t, &s) in states.iter().enumerate() {
            gamma[t * k + s] += w;
        }
    }
    gamma.iter_mut().for_each(|g| *g /= total);
    Ok(PosteriorSequence {
        gamma,
        num_states: k,
        log_evidence: max + total.ln(),
    })
}

pub fn forward_pass(model: &HmsmmModel, x: &EegSequence) -> Result<ForwardPass> {
    forward_from_log_likelihoods(&model.transition, &model.log_likelihoods(x)?)
}

pub fn backward_pass(model: &HmsmmModel, x: &EegSequence, log_normalizers: &[f64]) -> Result<BackwardPass> {
    backward_from_log_likelihoods(&model.transition, &model.log_likelihoods(x)?, log_normalizers)
}

/// `p(z_t | X)` for every `t`, by forward-backward.
pub fn posterior(model: &HmsmmModel, x: &EegSequence) -> Result<PosteriorSequence> {
    posterior_from_log_likelihoods(&model.transition, &model.log_likelihoods(x)?)
}

/// `p(z_t | x_1..t)` for every `t`; row `t` never depends on later samples.
pub fn filter_forward(model: &HmsmmModel, x: &EegSequence) -> Result<PosteriorSequence> {
    filter_from_log_likelihoods(&model.transition, &model.log_likelihoods(x)?)
}

pub fn brute_force_posterior(model: &HmsmmModel, x: &EegSequence) -> Result<PosteriorSequence> {
    brute_force_from_log_likelihoods(&model.transition, &model.log_likelihoods(x)?)
}
