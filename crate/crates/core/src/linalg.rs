//! Small dense symmetric positive-definite helpers on row-major storage.

use crate::error::{Error, Result};

/// Jitter escalation: start at `1e-10 * trace / D`, grow tenfold per retry.
const JITTER_START: f64 = 1e-10;
const JITTER_RETRIES: usize = 6;

/// Lower-triangular factor `L` of an SPD matrix, `S = L L^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    dim: usize,
    /// Row-major lower triangle, full `dim x dim` storage.
    lower: Vec<f64>,
    /// `L^{-T}` (row `k` is column `k` of `L^{-1}`), zeros included.
    /// Distances become independent multiply-adds instead of a serial
    /// forward substitution.
    inv_lower_t: Vec<f64>,
    log_det: f64,
}

impl Cholesky {
    /// Plain factorization; `None` when a pivot is not strictly positive.
    pub fn new(matrix: &[f64], dim: usize) -> Option<Self> {
        debug_assert_eq!(matrix.len(), dim * dim);
        let mut lower = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut s = matrix[i * dim + j];
                for k in 0..j {
                    s -= lower[i * dim + k] * lower[j * dim + k];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    lower[i * dim + i] = s.sqrt();
                } else {
                    lower[i * dim + j] = s / lower[j * dim + j];
                }
            }
        }
        let log_det = 2.0 * (0..dim).map(|i| lower[i * dim + i].ln()).sum::<f64>();
        let mut inv_lower = vec![0.0; dim * dim];
        for j in 0..dim {
            inv_lower[j * dim + j] = 1.0 / lower[j * dim + j];
            for i in j + 1..dim {
                let s: f64 = (j..i).map(|k| lower[i * dim + k] * inv_lower[k * dim + j]).sum();
                inv_lower[i * dim + j] = -s / lower[i * dim + i];
            }
        }
        let mut inv_lower_t = vec![0.0; dim * dim];
        for i in 0..dim {
            for k in 0..dim {
                inv_lower_t[k * dim + i] = inv_lower[i * dim + k];
            }
        }
        Some(Cholesky {
            dim,
            lower,
            inv_lower_t,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `ln |S|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// `|L^{-1} v|^2`, the squared Mahalanobis norm of `v` under `S`.
    pub fn mahalanobis_sq(&self, v: &[f64]) -> f64 {
        let n = self.dim;
        let v = &v[..n];
        match n {
            1 => quad_fixed::<1>(&self.inv_lower_t, v),
            2 => quad_fixed::<2>(&self.inv_lower_t, v),
            3 => quad_fixed::<3>(&self.inv_lower_t, v),
            4 => quad_fixed::<4>(&self.inv_lower_t, v),
            5 => quad_fixed::<5>(&self.inv_lower_t, v),
            6 => quad_fixed::<6>(&self.inv_lower_t, v),
            7 => quad_fixed::<7>(&self.inv_lower_t, v),
            8 => quad_fixed::<8>(&self.inv_lower_t, v),
            _ => {
                let mut y = vec![0.0; n];
                for (col, &vk) in self.inv_lower_t.chunks_exact(n).zip(v) {
                    for (yi, m) in y.iter_mut().zip(col) {
                        *yi += m * vk;
                    }
                }
                y.iter().map(|yi| yi * yi).sum()
            }
        }
    }

    /// `L z`.
    pub fn mul_lower(&self, z: &[f64], out: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            out[i] = (0..=i).map(|k| self.lower[i * n + k] * z[k]).sum();
        }
    }
}

/// `|M v|^2` from `M^T` with the dimension known at compile time, so the
/// loops unroll and vectorize.
#[inline]
fn quad_fixed<const N: usize>(mt: &[f64], v: &[f64]) -> f64 {
    let v: &[f64; N] = v.try_into().expect("vector of matching length");
    let mut y = [0.0f64; N];
    for (col, &vk) in mt.chunks_exact(N).zip(v) {
        let col: &[f64; N] = col.try_into().expect("column of matching length");
        for i in 0..N {
            y[i] += col[i] * vk;
        }
    }
    y.iter().map(|yi| yi * yi).sum()
}

/// Outcome of factorizing with jitter escalation.
#[derive(Debug, Clone)]
pub struct Factored {
    /// The matrix actually factorized (input plus any diagonal jitter).
    pub matrix: Vec<f64>,
    pub factor: Cholesky,
    /// Total diagonal jitter added; zero when none was needed.
    pub jitter: f64,
}

/// Factorize, adding escalating diagonal jitter if the plain attempt fails.
pub fn factor_with_jitter(matrix: &[f64], dim: usize) -> Result<Factored> {
    if let Some(factor) = Cholesky::new(matrix, dim) {
        return Ok(Factored {
            matrix: matrix.to_vec(),
            factor,
            jitter: 0.0,
        });
    }
    let trace: f64 = (0..dim).map(|i| matrix[i * dim + i]).sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    let mut jitter = JITTER_START * trace / dim as f64;
    for _ in 0..=JITTER_RETRIES {
        let mut m = matrix.to_vec();
        for i in 0..dim {
            m[i * dim + i] += jitter;
        }
        if let Some(factor) = Cholesky::new(&m, dim) {
            return Ok(Factored {
                matrix: m,
                factor,
                jitter,
            });
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Replace `m` by `(m + m^T) / 2`.
pub fn symmetrize(m: &mut [f64], dim: usize) {
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (m[i * dim + j] + m[j * dim + i]);
            m[i * dim + j] = v;
            m[j * dim + i] = v;
        }
    }
}

/// Largest `|m_ij - m_ji|` relative to the largest `|m_ij|`.
pub fn asymmetry(m: &[f64], dim: usize) -> f64 {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for i in 0..dim {
        for j in 0..i {
            worst = worst.max((m[i * dim + j] - m[j * dim + i]).abs());
        }
    }
    worst / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_reproduces_matrix() {
        let s = [4.0, 2.0, 0.6, 2.0, 2.0, 0.5, 0.6, 0.5, 3.0];
        let c = Cholesky::new(&s, 3).unwrap();
        let l = c.lower();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((v - s[i * 3 + j]).abs() < 1e-14);
            }
        }
        let (_, log_det) = hmsmm_oracles::dense_inverse(&s, 3);
        assert!((c.log_det() - log_det).abs() < 1e-13);
    }

    #[test]
    fn singular_matrix_gets_minimal_jitter() {
        let s = [2.0, 0.0, 0.0, 0.0];
        assert!(Cholesky::new(&s, 2).is_none());
        let f = factor_with_jitter(&s, 2).unwrap();
        assert_eq!(f.jitter, 1e-10);
        assert_eq!(f.matrix, vec![2.0 + 1e-10, 0.0, 0.0, 1e-10]);
    }

    #[test]
    fn indefinite_matrix_fails_after_retries() {
        let s = [1.0, 0.0, 0.0, -1.0];
        assert!(matches!(factor_with_jitter(&s, 2), Err(Error::NotPositiveDefinite)));
        assert!(factor_with_jitter(&[0.0; 4], 2).is_err());
    }

    #[test]
    fn large_dimension_uses_heap_buffer() {
        let n = 40;
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            s[i * n + i] = 4.0;
        }
        let c = Cholesky::new(&s, n).unwrap();
        let v = vec![2.0; n];
        assert!((c.mahalanobis_sq(&v) - n as f64).abs() < 1e-12);
    }
}
