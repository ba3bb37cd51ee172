//! Scale-mixture emission densities.
//!
//! Each state emits `x ~ N(mu, u * Sigma)` with a latent scale
//! `u ~ InvGamma(nu/2, nu/2)`. Integrating `u` out gives the multivariate
//! Student-t, which is what [`log_emission`] evaluates. Everything is in log
//! space; at `D = 19` linear-space densities underflow.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};
use crate::special::ln_gamma;

const SYMMETRY_TOL: f64 = 1e-12;

/// Per-state `(mu, Sigma, nu)` with the factor of `Sigma` cached.
///
/// The inverse-gamma shape and rate are both `nu / 2`; they are derived on
/// demand and never stored.
#[derive(Debug, Clone)]
pub struct EmissionParams {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    nu: f64,
    factor: Cholesky,
    jitter: f64,
    /// `lnΓ((ν+D)/2) − lnΓ(ν/2) − (D/2) ln(νπ) − ½ ln|Σ|`
    log_norm: f64,
}

impl PartialEq for EmissionParams {
    fn eq(&self, other: &Self) -> bool {
        self.mu == other.mu && self.sigma == other.sigma && self.nu == other.nu
    }
}

impl EmissionParams {
    /// `sigma` is row-major `D x D`. If the plain Cholesky factorization fails,
    /// diagonal jitter is escalated and the jittered matrix is what gets stored.
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, nu: f64) -> Result<Self> {
        let dim = mu.len();
        if dim == 0 {
            return Err(Error::InvalidParameter("mean vector is empty".into()));
        }
        if sigma.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: sigma.len(),
            });
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("emission parameters"));
        }
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::InvalidParameter(format!("nu must be positive, got {nu}")));
        }
        let asym = linalg::asymmetry(&sigma, dim);
        if asym > SYMMETRY_TOL {
            return Err(Error::InvalidParameter(format!(
                "covariance not symmetric (relative asymmetry {asym:e})"
            )));
        }
        let factored = linalg::factor_with_jitter(&sigma, dim)?;
        let d = dim as f64;
        let log_norm =
            ln_gamma(0.5 * (nu + d)) - ln_gamma(0.5 * nu) - 0.5 * d * (nu * PI).ln() - 0.5 * factored.factor.log_det();
        Ok(EmissionParams {
            mu,
            sigma: factored.matrix,
            nu,
            factor: factored.factor,
            jitter: factored.jitter,
            log_norm,
        })
    }

    /// Same location and scale, different degrees of freedom.
    pub fn with_nu(&self, nu: f64) -> Result<Self> {
        Self::new(self.mu.clone(), self.sigma.clone(), nu)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Row-major `D x D`, including any jitter that was added.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    /// Diagonal jitter that had to be added to make `Sigma` factorizable.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Inverse-gamma `(shape, rate)` of the latent scale, both `nu / 2`.
    pub fn mixing_shape_rate(&self) -> (f64, f64) {
        (0.5 * self.nu, 0.5 * self.nu)
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation"));
        }
        Ok(())
    }

    /// Squared Mahalanobis distance without input validation.
    #[inline]
    pub(crate) fn distance_sq(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut diff = [0.0f64; 32];
        if n <= 32 {
            for i in 0..n {
                diff[i] = x[i] - self.mu[i];
            }
            self.factor.mahalanobis_sq(&diff[..n])
        } else {
            let diff: Vec<f64> = x.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
            self.factor.mahalanobis_sq(&diff)
        }
    }

    /// Student-t log-density given a precomputed squared distance.
    #[inline]
    pub(crate) fn log_density_at_distance(&self, d: f64) -> f64 {
        self.log_norm - 0.5 * (self.nu + self.dim() as f64) * (d / self.nu).ln_1p()
    }

    #[inline]
    pub(crate) fn tau_at_distance(&self, d: f64) -> f64 {
        (self.nu + self.dim() as f64) / (self.nu + d)
    }
}

/// A point and a latent scale at which to evaluate `N(x | mu, u Sigma)`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledGaussianQuery<'a> {
    pub x: &'a [f64],
    pub u: f64,
}

/// `(x - mu)^T Sigma^{-1} (x - mu)` via a triangular solve on the cached factor.
pub fn mahalanobis_sq(x: &[f64], params: &EmissionParams) -> Result<f64> {
    params.check(x)?;
    Ok(params.distance_sq(x))
}

/// `ln N(x | mu, u Sigma)`.
pub fn log_gaussian_scaled(q: ScaledGaussianQuery<'_>, params: &EmissionParams) -> Result<f64> {
    if !(q.u > 0.0) || !q.u.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "latent scale must be positive, got {}",
            q.u
        )));
    }
    let d = mahalanobis_sq(q.x, params)?;
    let dim = params.dim() as f64;
    Ok(-0.5 * dim * (2.0 * PI).ln() - 0.5 * (dim * q.u.ln() + params.factor.log_det()) - 0.5 * d / q.u)
}

/// `ln InvGamma(u | a, b) = a ln b − lnΓ(a) − (a+1) ln u − b/u`.
pub fn log_inverse_gamma(u: f64, a: f64, b: f64) -> Result<f64> {
    if !(u > 0.0 && a > 0.0 && b > 0.0) || !(u.is_finite() && a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "inverse gamma needs positive arguments, got u={u}, a={a}, b={b}"
        )));
    }
    Ok(a * b.ln() - ln_gamma(a) - (a + 1.0) * u.ln() - b / u)
}

/// Log of the scale-mixture marginal, evaluated as a multivariate Student-t.
pub fn log_emission(x: &[f64], params: &EmissionParams) -> Result<f64> {
    let d = mahalanobis_sq(x, params)?;
    Ok(params.log_density_at_distance(d))
}

/// `E[1/u | x] = (nu + D) / (nu + d(x))`.
pub fn tau(x: &[f64], params: &EmissionParams) -> Result<f64> {
    let d = mahalanobis_sq(x, params)?;
    Ok(params.tau_at_distance(d))
}
