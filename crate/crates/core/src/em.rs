//! Supervised EM fitting of per-state scale-mixture emissions.
//!
//! With hard state labels the states decouple, so each state's
//! `(mu, Sigma, nu)` is fitted by the multivariate-t EM on its own samples.
//! The E-step supplies `tau = E[1/u | x]` and `ell = E[ln(1/u) | x]`, both at
//! the pre-update parameters; the M-step updates `mu`, then `Sigma` with the
//! new `mu`, then `nu` by bisection on the stationarity condition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::emission::EmissionParams;
use crate::error::{Error, Result};
use crate::linalg::{self, CompensatedSum};
use crate::special::{digamma, ln_gamma};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop when the relative change of the observed-data log-likelihood
    /// drops below this.
    pub tolerance: f64,
    pub nu_min: f64,
    pub nu_max: f64,
    /// Bisection stops once the bracket is narrower than `nu_tolerance * nu`.
    pub nu_tolerance: f64,
    /// Starting degrees of freedom for [`initial_params`].
    pub nu_init: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iterations: 200,
            tolerance: 1e-8,
            nu_min: 0.01,
            nu_max: 1000.0,
            nu_tolerance: 1e-12,
            nu_init: 10.0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.nu_tolerance > 0.0) {
            return Err(Error::InvalidParameter("EM tolerances must be positive".into()));
        }
        if !(self.nu_min > 0.0 && self.nu_min < self.nu_max && self.nu_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "nu bracket [{}, {}] is invalid",
                self.nu_min, self.nu_max
            )));
        }
        if !(self.nu_init > 0.0) {
            return Err(Error::InvalidParameter("nu_init must be positive".into()));
        }
        Ok(())
    }
}

/// Per-iteration record of one state's fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Observed-data log-likelihood at the parameters entering each iteration,
    /// plus the final parameters.
    pub log_likelihood: Vec<f64>,
    /// Expected complete-data log-likelihood `Q(old | old)` per M-step.
    pub objective_before: Vec<f64>,
    /// `Q(new | old)` per M-step.
    pub objective_after: Vec<f64>,
    /// Number of M-steps taken.
    pub iterations: usize,
    pub converged: bool,
    /// Set when any `nu` update hit an end of the bracket.
    pub nu_clamped: bool,
}

impl EmTrace {
    /// Largest drop in log-likelihood between consecutive iterations (0 if none).
    pub fn worst_decrease(&self) -> f64 {
        self.log_likelihood.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
    }
}

/// `tau_i` for every sample.
pub fn e_step_tau(samples: &[&[f64]], params: &EmissionParams) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyState(None));
    }
    samples.iter().map(|x| crate::emission::tau(x, params)).collect()
}

fn check_weights(samples: &[&[f64]], taus: &[f64]) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::EmptyState(None));
    }
    if samples.len() != taus.len() {
        return Err(Error::DimensionMismatch {
            expected: samples.len(),
            got: taus.len(),
        });
    }
    if taus.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidParameter("weights must be positive and finite".into()));
    }
    let dim = samples[0].len();
    if let Some(x) = samples.iter().find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.len(),
        });
    }
    Ok(dim)
}

/// `sum tau_i x_i / sum tau_i`.
pub fn m_step_mean(samples: &[&[f64]], taus: &[f64]) -> Result<Vec<f64>> {
    let dim = check_weights(samples, taus)?;
    Ok(weighted_mean(samples, taus, dim))
}

fn weighted_mean(samples: &[&[f64]], taus: &[f64], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for (x, &t) in samples.iter().zip(taus) {
        total += t;
        for (a, v) in acc.iter_mut().zip(x.iter()) {
            *a += t * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    acc
}

/// `sum tau_i (x_i - mu)(x_i - mu)^T / n`, symmetrized. The divisor is the
/// sample count, not the weight total. If the result cannot be factorized,
/// diagonal jitter is added.
pub fn m_step_cov(samples: &[&[f64]], taus: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
    let dim = check_weights(samples, taus)?;
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    if mu.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: mu.len(),
        });
    }
    let raw = weighted_scatter(samples, taus, mu);
    Ok(linalg::factor_with_jitter(&raw, dim)?.matrix)
}

fn weighted_scatter(samples: &[&[f64]], taus: &[f64], mu: &[f64]) -> Vec<f64> {
    let dim = mu.len();
    let mut acc = match dim {
        1 => scatter_fixed::<1>(samples, taus, mu),
        2 => scatter_fixed::<2>(samples, taus, mu),
        3 => scatter_fixed::<3>(samples, taus, mu),
        4 => scatter_fixed::<4>(samples, taus, mu),
        5 => scatter_fixed::<5>(samples, taus, mu),
        6 => scatter_fixed::<6>(samples, taus, mu),
        7 => scatter_fixed::<7>(samples, taus, mu),
        8 => scatter_fixed::<8>(samples, taus, mu),
        _ => scatter_any(samples, taus, mu),
    };
    let n = samples.len() as f64;
    for i in 0..dim {
        for j in 0..=i {
            let v = acc[i * dim + j] / n;
            acc[i * dim + j] = v;
            acc[j * dim + i] = v;
        }
    }
    acc
}

/// Unscaled scatter; only the lower triangle is meaningful.
fn scatter_any(samples: &[&[f64]], taus: &[f64], mu: &[f64]) -> Vec<f64> {
    let dim = mu.len();
    let mut acc = vec![0.0; dim * dim];
    let mut diff = vec![0.0; dim];
    for (x, &t) in samples.iter().zip(taus) {
        for i in 0..dim {
            diff[i] = x[i] - mu[i];
        }
        for i in 0..dim {
            let w = t * diff[i];
            let row = &mut acc[i * dim..i * dim + i + 1];
            for (a, dj) in row.iter_mut().zip(&diff[..=i]) {
                *a += w * dj;
            }
        }
    }
    acc
}

/// [`scatter_any`] with the dimension fixed at compile time. Accumulates the
/// full square so the inner loop vectorizes.
fn scatter_fixed<const N: usize>(samples: &[&[f64]], taus: &[f64], mu: &[f64]) -> Vec<f64> {
    let mu: &[f64; N] = mu.try_into().expect("mean of matching length");
    let mut acc = vec![[0.0f64; N]; N];
    let mut diff = [0.0f64; N];
    for (x, &t) in samples.iter().zip(taus) {
        let x: &[f64; N] = (*x).try_into().expect("sample of matching length");
        for i in 0..N {
            diff[i] = x[i] - mu[i];
        }
        for (row, &di) in acc.iter_mut().zip(&diff) {
            let w = t * di;
            for j in 0..N {
                row[j] += w * diff[j];
            }
        }
    }
    acc.concat()
}

/// Result of a degrees-of-freedom update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuUpdate {
    pub nu: f64,
    /// The stationarity condition had no root inside the bracket.
    pub clamped: bool,
}

/// `g(nu) = ln(nu/2) + 1 - psi(nu/2) + mean(ell - tau)`; the derivative of
/// the `nu`-part of the expected complete-data log-likelihood, times `2/n`.
pub fn nu_stationarity(nu: f64, mean_ell_minus_tau: f64) -> f64 {
    (0.5 * nu).ln() + 1.0 - digamma(0.5 * nu) + mean_ell_minus_tau
}

/// Per-sample `nu`-dependent part of the expected complete-data
/// log-likelihood.
fn nu_objective(nu: f64, mean_ell_minus_tau: f64) -> f64 {
    let h = 0.5 * nu;
    h * h.ln() - ln_gamma(h) + h * mean_ell_minus_tau
}

/// Maximize the `nu`-part of the objective by bisection on its derivative.
///
/// `log_u_expectations[i]` is `E[ln(1/u_i) | x_i]` from the same E-step as
/// `taus`. The derivative is strictly decreasing in `nu`, so the root is
/// unique when it exists; otherwise the better bracket end is returned with
/// `clamped` set.
pub fn update_nu_bisection(taus: &[f64], log_u_expectations: &[f64], config: &EmConfig) -> Result<NuUpdate> {
    if taus.is_empty() {
        return Err(Error::EmptyState(None));
    }
    if taus.len() != log_u_expectations.len() {
        return Err(Error::DimensionMismatch {
            expected: taus.len(),
            got: log_u_expectations.len(),
        });
    }
    let mut acc = CompensatedSum::default();
    for (l, t) in log_u_expectations.iter().zip(taus) {
        acc.add(l - t);
    }
    let c = acc.value() / taus.len() as f64;
    Ok(bisect_nu(c, config))
}

fn bisect_nu(c: f64, config: &EmConfig) -> NuUpdate {
    let (mut lo, mut hi) = (config.nu_min, config.nu_max);
    let g_lo = nu_stationarity(lo, c);
    let g_hi = nu_stationarity(hi, c);
    if g_lo.signum() == g_hi.signum() && g_lo != 0.0 && g_hi != 0.0 {
        let nu = if nu_objective(lo, c) >= nu_objective(hi, c) {
            lo
        } else {
            hi
        };
        return NuUpdate { nu, clamped: true };
    }
    for _ in 0..500 {
        let mid = 0.5 * (lo + hi);
        let g = nu_stationarity(mid, c);
        if g == 0.0 {
            return NuUpdate {
                nu: mid,
                clamped: false,
            };
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        let next = 0.5 * (lo + hi);
        if hi - lo <= config.nu_tolerance * next || next == lo || next == hi {
            break;
        }
    }
    NuUpdate {
        nu: 0.5 * (lo + hi),
        clamped: false,
    }
}

/// Sample mean, biased sample covariance and `config.nu_init`.
pub fn initial_params(samples: &[&[f64]], config: &EmConfig) -> Result<EmissionParams> {
    let ones = vec![1.0; samples.len()];
    let mu = m_step_mean(samples, &ones)?;
    let sigma = m_step_cov(samples, &ones, &mu)?;
    EmissionParams::new(mu, sigma, config.nu_init)
}

struct Expectations {
    log_likelihood: f64,
    taus: Vec<f64>,
    /// `sum_i tau_i x_i / sum_i tau_i`, the next mean.
    weighted_mean: Vec<f64>,
    /// `sum_i ell_i`
    sum_ell: f64,
    /// `sum_i tau_i d_i`
    sum_tau_d: f64,
    sum_tau: f64,
}

/// One pass over the samples. Sums are accumulated in short plain blocks
/// that are then combined with compensation.
fn expectations(samples: &[&[f64]], params: &EmissionParams) -> Expectations {
    const BLOCK: usize = 256;
    let dim = params.dim();
    let nu = params.nu();
    let half_nd = 0.5 * (nu + dim as f64);
    let n = samples.len() as f64;
    let mut log1p_sum = CompensatedSum::default();
    let mut sum_tau_d = CompensatedSum::default();
    let mut sum_tau = CompensatedSum::default();
    let mut taus = Vec::with_capacity(samples.len());
    let mut weighted = vec![0.0; dim];
    let mut total = 0.0;
    for block in samples.chunks(BLOCK) {
        let (mut l, mut td, mut tt) = (0.0, 0.0, 0.0);
        for x in block {
            let d = params.distance_sq(x);
            let t = params.tau_at_distance(d);
            // ln(1 + d/nu) feeds both the density and E[ln 1/u]
            l += (d / nu).ln_1p();
            td += t * d;
            tt += t;
            total += t;
            for (a, v) in weighted.iter_mut().zip(x.iter()) {
                *a += t * v;
            }
            taus.push(t);
        }
        log1p_sum.add(l);
        sum_tau_d.add(td);
        sum_tau.add(tt);
    }
    weighted.iter_mut().for_each(|a| *a /= total);
    let l = log1p_sum.value();
    // ell_i = psi((nu+D)/2) - ln(nu/2) - ln(1 + d_i/nu)
    let ell_const = digamma(half_nd) - (0.5 * nu).ln();
    Expectations {
        log_likelihood: n * params.log_density_at_distance(0.0) - half_nd * l,
        taus,
        weighted_mean: weighted,
        sum_ell: n * ell_const - l,
        sum_tau_d: sum_tau_d.value(),
        sum_tau: sum_tau.value(),
    }
}

/// Expected complete-data log-likelihood for parameters with log-determinant
/// `log_det`, degrees of freedom `nu`, given E-step sums.
fn complete_objective(n: f64, dim: f64, log_det: f64, nu: f64, sum_ell: f64, sum_tau: f64, sum_tau_d: f64) -> f64 {
    let h = 0.5 * nu;
    n * (-0.5 * dim * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det + h * h.ln() - ln_gamma(h))
        + (0.5 * dim + h - 1.0) * sum_ell
        - 0.5 * sum_tau_d
        - h * sum_tau
}

/// `tr(Sigma^{-1} M)` through the cached factor of `Sigma`.
fn trace_inv_times(params: &EmissionParams, m: &[f64]) -> f64 {
    let dim = params.dim();
    let f = params.factor();
    // tr(S^-1 M) = sum_j e_j^T S^-1 M e_j; M symmetric so use L^-1 on columns
    // via the polarization of the quadratic form.
    let mut total = 0.0;
    let mut col = vec![0.0; dim];
    for j in 0..dim {
        for i in 0..dim {
            col[i] = m[i * dim + j];
        }
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        let plus: Vec<f64> = e.iter().zip(&col).map(|(a, b)| a + b).collect();
        let minus: Vec<f64> = e.iter().zip(&col).map(|(a, b)| a - b).collect();
        total += 0.25 * (f.mahalanobis_sq(&plus) - f.mahalanobis_sq(&minus));
    }
    total
}

/// Fit one state's emission parameters by EM, starting from `init`.
pub fn fit_state_emission(
    samples: &[&[f64]],
    init: &EmissionParams,
    config: &EmConfig,
) -> Result<(EmissionParams, EmTrace)> {
    config.validate()?;
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let dim = init.dim();
    if let Some(x) = samples.iter().find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.len(),
        });
    }
    let n = samples.len() as f64;
    let mut params = init.clone();
    let mut trace = EmTrace::default();
    let mut previous: Option<f64> = None;

    for iteration in 0..=config.max_iterations {
        let e = expectations(samples, &params);
        if !e.log_likelihood.is_finite() {
            return Err(Error::NonFiniteLikelihood(iteration));
        }
        trace.log_likelihood.push(e.log_likelihood);
        if let Some(prev) = previous {
            if (e.log_likelihood - prev).abs() <= config.tolerance * prev.abs() {
                trace.converged = true;
                break;
            }
        }
        if iteration == config.max_iterations {
            break;
        }
        previous = Some(e.log_likelihood);

        let q_before = complete_objective(
            n,
            dim as f64,
            params.factor().log_det(),
            params.nu(),
            e.sum_ell,
            e.sum_tau,
            e.sum_tau_d,
        );

        let mu = e.weighted_mean.clone();
        let raw = weighted_scatter(samples, &e.taus, &mu);
        let mean_ell_minus_tau = (e.sum_ell - e.sum_tau) / n;
        let nu_update = bisect_nu(mean_ell_minus_tau, config);
        trace.nu_clamped |= nu_update.clamped;
        let next = EmissionParams::new(mu, raw.clone(), nu_update.nu)?;

        // sum_i tau_i d_i(new) = n tr(Sigma_new^{-1} raw)
        let sum_tau_d_new = n * trace_inv_times(&next, &raw);
        let q_after = complete_objective(
            n,
            dim as f64,
            next.factor().log_det(),
            next.nu(),
            e.sum_ell,
            e.sum_tau,
            sum_tau_d_new,
        );
        trace.objective_before.push(q_before);
        trace.objective_after.push(q_after);
        trace.iterations += 1;
        params = next;
    }
    Ok((params, trace))
}

/// Partition by label and fit every state from the default initialization.
/// Returns parameters in state order.
pub fn fit_all_states(data: &LabeledDataset, config: &EmConfig) -> Result<Vec<EmissionParams>> {
    Ok(fit_all_states_with_traces(data, config)?
        .into_iter()
        .map(|(p, _)| p)
        .collect())
}

pub fn fit_all_states_with_traces(data: &LabeledDataset, config: &EmConfig) -> Result<Vec<(EmissionParams, EmTrace)>> {
    let partitions: Vec<Vec<&[f64]>> = (0..data.num_states).map(|k| data.samples_for_state(k)).collect();
    fit_partitions(&partitions, config)
}

/// Fit one emission per partition, `partitions[k]` holding state `k`'s
/// samples.
pub fn fit_partitions(partitions: &[Vec<&[f64]>], config: &EmConfig) -> Result<Vec<(EmissionParams, EmTrace)>> {
    config.validate()?;
    for (k, part) in partitions.iter().enumerate() {
        match part.len() {
            0 => return Err(Error::EmptyState(Some(k + 1))),
            1 => return Err(Error::InsufficientSamples { needed: 2, got: 1 }),
            _ => {}
        }
    }
    partitions
        .par_iter()
        .map(|part| {
            let init = initial_params(part, config)?;
            fit_state_emission(part, &init, config)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emission::test_support::{random_spd, rng};
    use crate::emission::{log_emission, tau};
    use crate::synthetic::sample_student_t;
    use hmsmm_oracles as oracle;
    use rand::Rng;

    fn t_samples(mu: &[f64], sigma: &[f64], nu: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let p = EmissionParams::new(mu.to_vec(), sigma.to_vec(), nu).unwrap();
        let mut r = rng(seed);
        (0..n).map(|_| sample_student_t(&p, &mut r).0).collect()
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    fn identity(dim: usize) -> Vec<f64> {
        let mut s = vec![0.0; dim * dim];
        for i in 0..dim {
            s[i * dim + i] = 1.0;
        }
        s
    }

    #[test]
    fn tau_batch_cases() {
        let mu = vec![0.0; 19];
        let p = EmissionParams::new(mu.clone(), identity(19), 4.0).unwrap();
        let batch = vec![mu.as_slice(); 5];
        assert!(e_step_tau(&batch, &p).unwrap().iter().all(|&t| t == 5.75));
        let one = vec![1.0; 19];
        let t = e_step_tau(&[one.as_slice()], &p).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-15);
        assert!(matches!(e_step_tau(&[], &p), Err(Error::EmptyState(None))));
        assert_eq!(Error::EmptyState(None).to_string(), "empty state");

        let mut r = rng(1);
        let s = random_spd(3, &mut r);
        let p = EmissionParams::new(vec![0.1, 0.2, 0.3], s, 3.0).unwrap();
        let xs: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        let batch = e_step_tau(&refs(&xs), &p).unwrap();
        for (x, b) in xs.iter().zip(batch) {
            assert!((tau(x, &p).unwrap() - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn mean_step_cases() {
        let xs = vec![vec![0.0], vec![3.0]];
        assert_eq!(m_step_mean(&refs(&xs), &[1.0, 2.0]).unwrap(), vec![2.0]);
        let xs = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]];
        let m = m_step_mean(&refs(&xs), &[0.7; 3]).unwrap();
        assert!((m[0] - 3.0).abs() < 1e-15 && (m[1] - 5.0).abs() < 1e-15);

        let mut r = rng(2);
        let xs: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..4).map(|_| r.random_range(-5.0..5.0)).collect())
            .collect();
        let w: Vec<f64> = (0..100).map(|_| r.random_range(0.1..3.0)).collect();
        let got = m_step_mean(&refs(&xs), &w).unwrap();
        let want = oracle::naive_weighted_mean(&xs, &w);
        for (g, e) in got.iter().zip(want) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!(m_step_mean(&refs(&xs), &w[..10]).is_err());
        assert!(m_step_mean(&refs(&xs[..1]), &[0.0]).is_err());
    }

    #[test]
    fn cov_step_cases() {
        let xs = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let s = m_step_cov(&refs(&xs), &[2.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s, vec![2.0 + 1e-10, 0.0, 0.0, 1e-10]);

        let xs = vec![vec![1.0, 2.0], vec![3.0, 1.0], vec![0.0, 0.0]];
        let mu = m_step_mean(&refs(&xs), &[1.0; 3]).unwrap();
        let s = m_step_cov(&refs(&xs), &[1.0; 3], &mu).unwrap();
        let want = oracle::naive_weighted_scatter(&xs, &[1.0; 3], &mu);
        for (g, e) in s.iter().zip(want) {
            assert!((g - e).abs() < 1e-14);
        }

        let mut r = rng(3);
        let xs: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..5).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        let w: Vec<f64> = (0..200).map(|_| r.random_range(0.1..3.0)).collect();
        let mu = vec![0.1, -0.1, 0.0, 0.3, 0.2];
        let got = m_step_cov(&refs(&xs), &w, &mu).unwrap();
        let want = oracle::naive_weighted_scatter(&xs, &w, &mu);
        for (g, e) in got.iter().zip(want) {
            assert!((g - e).abs() < 1e-10);
        }

        assert!(matches!(
            m_step_cov(&refs(&xs[..1]), &[1.0], &mu),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn nu_recovered_from_t_samples() {
        let config = EmConfig::default();
        for seed in 0..3 {
            let xs = t_samples(&[0.0, 0.0], &identity(2), 5.0, 50_000, 100 + seed);
            let p = EmissionParams::new(vec![0.0, 0.0], identity(2), 5.0).unwrap();
            let x = refs(&xs);
            let taus = e_step_tau(&x, &p).unwrap();
            let psi = digamma(0.5 * (5.0 + 2.0));
            let ells: Vec<f64> = x.iter().map(|x| psi - (0.5 * (5.0 + p.distance_sq(x))).ln()).collect();
            let up = update_nu_bisection(&taus, &ells, &config).unwrap();
            assert!(!up.clamped);
            assert!((up.nu - 5.0).abs() < 0.5, "seed {seed}: {}", up.nu);

            let c = ells.iter().zip(&taus).map(|(l, t)| l - t).sum::<f64>() / taus.len() as f64;
            assert!(nu_stationarity(up.nu, c).abs() <= 1e-6);
        }
    }

    #[test]
    fn gaussian_data_clamps_nu_to_upper_bound() {
        let xs = t_samples(&[0.0, 0.0], &identity(2), 1e9, 20_000, 9);
        let x = refs(&xs);
        let config = EmConfig::default();
        let truth = EmissionParams::new(vec![0.0, 0.0], identity(2), 1e9).unwrap();
        let taus = e_step_tau(&x, &truth).unwrap();
        let psi = digamma(0.5 * (1e9 + 2.0));
        let ells: Vec<f64> = x
            .iter()
            .map(|x| psi - (0.5 * (1e9 + truth.distance_sq(x))).ln())
            .collect();
        let up = update_nu_bisection(&taus, &ells, &config).unwrap();
        assert_eq!(up.nu, config.nu_max);
        assert!(up.clamped);

        // From nu = 10 the full fit only creeps upward, but it must keep rising.
        let init = initial_params(&x, &config).unwrap();
        let (fit, _) = fit_state_emission(&x, &init, &config).unwrap();
        assert!(fit.nu() > 30.0, "{}", fit.nu());
    }

    #[test]
    fn recovers_bivariate_t() {
        let mu = [1.0, -2.0];
        let sigma = [2.0, 0.5, 0.5, 1.0];
        let xs = t_samples(&mu, &sigma, 5.0, 20_000, 42);
        let x = refs(&xs);
        let config = EmConfig::default();
        let init = initial_params(&x, &config).unwrap();
        let (fit, trace) = fit_state_emission(&x, &init, &config).unwrap();
        assert!(trace.converged);
        for (a, b) in fit.mu().iter().zip(mu) {
            assert!((a - b).abs() < 0.05);
        }
        for (a, b) in fit.sigma().iter().zip(sigma) {
            assert!((a - b).abs() < 0.1);
        }
        assert!((fit.nu() - 5.0).abs() < 0.5, "{}", fit.nu());
        assert!(trace.worst_decrease() <= 1e-9);
        for (before, after) in trace.objective_before.iter().zip(&trace.objective_after) {
            assert!(after - before >= -1e-9 * before.abs().max(1.0));
        }
    }

    /// Converges all the way to the fixed point rather than stopping on the
    /// default likelihood tolerance.
    fn tight() -> EmConfig {
        EmConfig {
            tolerance: 1e-15,
            max_iterations: 5_000,
            ..EmConfig::default()
        }
    }

    #[test]
    fn refit_from_fixed_point_stops_immediately() {
        let xs = t_samples(&[0.0, 1.0, 2.0], &identity(3), 4.0, 5_000, 7);
        let x = refs(&xs);
        let config = EmConfig::default();
        let init = initial_params(&x, &config).unwrap();
        let (first, _) = fit_state_emission(&x, &init, &tight()).unwrap();
        let (second, trace) = fit_state_emission(&x, &first, &config).unwrap();
        assert!(trace.converged);
        assert!(trace.iterations <= 2, "{}", trace.iterations);
        let drift = first
            .mu()
            .iter()
            .zip(second.mu())
            .chain(first.sigma().iter().zip(second.sigma()))
            .map(|(a, b)| (a - b).abs())
            .fold((first.nu() - second.nu()).abs(), f64::max);
        assert!(drift < 1e-6 * first.nu().max(1.0), "{drift}");
    }

    #[test]
    fn likelihood_never_decreases() {
        let mut r = rng(77);
        for case in 0..10 {
            let dim = 1 + case % 4;
            let s = random_spd(dim, &mut r);
            let mu: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let nu = r.random_range(1.0..8.0);
            let xs = t_samples(&mu, &s, nu, 3_000, 500 + case as u64);
            let x = refs(&xs);
            let init_mu: Vec<f64> = (0..dim).map(|_| r.random_range(-3.0..3.0)).collect();
            let init_s = random_spd(dim, &mut r);
            let init = EmissionParams::new(init_mu, init_s, r.random_range(0.5..50.0)).unwrap();
            let (_, trace) = fit_state_emission(&x, &init, &EmConfig::default()).unwrap();
            assert!(
                trace.worst_decrease() <= 1e-9,
                "case {case}: {}",
                trace.worst_decrease()
            );
            let ll: f64 = x.iter().map(|x| log_emission(x, &init).unwrap()).sum();
            assert!((trace.log_likelihood[0] - ll).abs() < 1e-8 * ll.abs());
        }
    }

    #[test]
    fn unit_weights_give_gaussian_ml() {
        let mut r = rng(4);
        let xs: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..3).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        let ones = vec![1.0; 300];
        let mu = m_step_mean(&refs(&xs), &ones).unwrap();
        let s = m_step_cov(&refs(&xs), &ones, &mu).unwrap();
        let n = xs.len() as f64;
        for j in 0..3 {
            let mean: f64 = xs.iter().map(|x| x[j]).sum::<f64>() / n;
            assert!((mu[j] - mean).abs() < 1e-14);
        }
        let want = oracle::naive_weighted_scatter(&xs, &ones, &mu);
        for (g, e) in s.iter().zip(want) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn affine_equivariance() {
        let xs = t_samples(&[0.5, -0.5], &[1.0, 0.3, 0.3, 0.8], 4.0, 4_000, 8);
        let w = [1.5, -0.4, 0.7, 2.0];
        let c = [3.0, -1.0];
        let ys: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| vec![w[0] * x[0] + w[1] * x[1] + c[0], w[2] * x[0] + w[3] * x[1] + c[1]])
            .collect();
        let config = tight();
        let fit = |v: &[Vec<f64>]| {
            let x = refs(v);
            let init = initial_params(&x, &config).unwrap();
            fit_state_emission(&x, &init, &config).unwrap().0
        };
        let fx = fit(&xs);
        let fy = fit(&ys);
        let m = fx.mu();
        let expected_mu = [w[0] * m[0] + w[1] * m[1] + c[0], w[2] * m[0] + w[3] * m[1] + c[1]];
        for (a, b) in fy.mu().iter().zip(expected_mu) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        let s = fx.sigma();
        for i in 0..2 {
            for j in 0..2 {
                let mut v = 0.0;
                for k in 0..2 {
                    for l in 0..2 {
                        v += w[i * 2 + k] * s[k * 2 + l] * w[j * 2 + l];
                    }
                }
                let got = fy.sigma()[i * 2 + j];
                assert!((got - v).abs() <= 1e-6 * v.abs().max(1.0), "{got} vs {v}");
            }
        }
        assert!((fx.nu() - fy.nu()).abs() <= 1e-6 * fx.nu());
    }

    #[test]
    fn deterministic() {
        let xs = t_samples(&[0.0, 0.0], &identity(2), 3.0, 2_000, 10);
        let x = refs(&xs);
        let config = EmConfig::default();
        let init = initial_params(&x, &config).unwrap();
        let a = fit_state_emission(&x, &init, &config).unwrap();
        let b = fit_state_emission(&x, &init, &config).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn fit_all_states_partitions() {
        use crate::data::{EegSequence, StateSequence};
        let a = t_samples(&[0.0, 0.0], &identity(2), 4.0, 1_500, 20);
        let b = t_samples(&[20.0, 20.0], &identity(2), 8.0, 1_000, 21);
        let rows: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
        let labels: Vec<usize> = (0..a.len()).map(|_| 0).chain((0..b.len()).map(|_| 1)).collect();
        let seq = EegSequence::from_rows(&rows, 100.0).unwrap();
        let config = EmConfig::default();

        let ds = LabeledDataset::new(vec![seq.clone()], vec![StateSequence(labels)], 2).unwrap();
        let fits = fit_all_states(&ds, &config).unwrap();
        for (k, part) in [&a, &b].iter().enumerate() {
            let x = refs(part);
            let init = initial_params(&x, &config).unwrap();
            let (single, _) = fit_state_emission(&x, &init, &config).unwrap();
            assert_eq!(fits[k], single);
        }

        let ds1 = LabeledDataset::new(vec![seq.clone()], vec![StateSequence(vec![0; rows.len()])], 1).unwrap();
        let all = fit_all_states(&ds1, &config).unwrap();
        let x = refs(&rows);
        let init = initial_params(&x, &config).unwrap();
        assert_eq!(all[0], fit_state_emission(&x, &init, &config).unwrap().0);

        let ds3 = LabeledDataset::new(vec![seq], vec![StateSequence(vec![0; rows.len()])], 3).unwrap();
        let err = fit_all_states(&ds3, &config).unwrap_err();
        assert_eq!(err.to_string(), "empty state 2");
    }
}
