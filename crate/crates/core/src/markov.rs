//! Initial-state and transition estimation from labeled sequences, with
//! structural zeros.

use serde::{Deserialize, Serialize};

use crate::data::StateSequence;
use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// `N1_k` (sequences starting in `k`) and `N_jk` (transitions `j -> k`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionCounts {
    pub initial: Vec<u64>,
    /// Row-major `K x K`.
    pub transitions: Vec<u64>,
    pub num_states: usize,
}

impl TransitionCounts {
    pub fn transition(&self, from: usize, to: usize) -> u64 {
        self.transitions[from * self.num_states + to]
    }

    /// Multiply every count by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        TransitionCounts {
            initial: self.initial.iter().map(|c| c * factor).collect(),
            transitions: self.transitions.iter().map(|c| c * factor).collect(),
            num_states: self.num_states,
        }
    }
}

/// Which transitions are structurally allowed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<bool>>", into = "Vec<Vec<bool>>")]
pub struct TransitionMask {
    num_states: usize,
    allowed: Vec<bool>,
}

impl TransitionMask {
    /// Every transition allowed.
    pub fn full(num_states: usize) -> Self {
        TransitionMask {
            num_states,
            allowed: vec![true; num_states * num_states],
        }
    }

    /// The three-state seizure cycle: self-loops plus
    /// pre-seizure -> seizure -> post-seizure -> pre-seizure.
    pub fn seizure_cycle(num_states: usize) -> Result<Self> {
        if num_states != 3 {
            return Err(Error::InvalidParameter(format!(
                "seizure-cycle mask needs exactly 3 states, got {num_states}"
            )));
        }
        let mut allowed = vec![false; 9];
        for (j, k) in [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 0)] {
            allowed[j * 3 + k] = true;
        }
        Ok(TransitionMask { num_states: 3, allowed })
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidParameter("mask must be a non-empty square matrix".into()));
        }
        if let Some(j) = rows.iter().position(|r| !r.iter().any(|&b| b)) {
            return Err(Error::InvalidParameter(format!(
                "mask row {} allows no transition",
                j + 1
            )));
        }
        Ok(TransitionMask {
            num_states: k,
            allowed: rows.concat(),
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn allows(&self, from: usize, to: usize) -> bool {
        self.allowed[from * self.num_states + to]
    }

    pub fn allowed_in_row(&self, from: usize) -> usize {
        (0..self.num_states).filter(|&k| self.allows(from, k)).count()
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        self.allowed.chunks(self.num_states).map(<[bool]>::to_vec).collect()
    }
}

impl TryFrom<Vec<Vec<bool>>> for TransitionMask {
    type Error = Error;

    fn try_from(rows: Vec<Vec<bool>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<TransitionMask> for Vec<Vec<bool>> {
    fn from(m: TransitionMask) -> Self {
        m.rows()
    }
}

/// `pi` and a row-stochastic `A` that is exactly zero wherever the mask
/// forbids a transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pi: Vec<f64>,
    /// Row-major `K x K`.
    a: Vec<f64>,
    mask: TransitionMask,
    /// Rows with no observed transitions that fell back to uniform.
    fallback_rows: Vec<usize>,
}

impl TransitionModel {
    /// Validate and wrap explicit parameters. `a` is given as rows.
    pub fn new(pi: Vec<f64>, a: Vec<Vec<f64>>, mask: TransitionMask) -> Result<Self> {
        let k = pi.len();
        if k == 0 || mask.num_states() != k {
            return Err(Error::DimensionMismatch {
                expected: mask.num_states(),
                got: k,
            });
        }
        if a.len() != k || a.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidParameter("transition matrix must be K x K".into()));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !pi.iter().all(in_unit) || (pi.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidParameter(format!(
                "initial probabilities {pi:?} are not a distribution"
            )));
        }
        for (j, row) in a.iter().enumerate() {
            if !row.iter().all(in_unit) || (row.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidParameter(format!(
                    "transition row {} is not a distribution",
                    j + 1
                )));
            }
            for (kk, &v) in row.iter().enumerate() {
                if v != 0.0 && !mask.allows(j, kk) {
                    return Err(Error::ForbiddenTransition {
                        from: j + 1,
                        to: kk + 1,
                    });
                }
            }
        }
        Ok(TransitionModel {
            pi,
            a: a.concat(),
            mask,
            fallback_rows: Vec::new(),
        })
    }

    pub fn num_states(&self) -> usize {
        self.pi.len()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn a(&self, from: usize, to: usize) -> f64 {
        self.a[from * self.pi.len() + to]
    }

    /// Row `from` of `A`.
    pub fn row(&self, from: usize) -> &[f64] {
        let k = self.pi.len();
        &self.a[from * k..(from + 1) * k]
    }

    pub fn a_rows(&self) -> Vec<Vec<f64>> {
        self.a.chunks(self.pi.len()).map(<[f64]>::to_vec).collect()
    }

    pub fn mask(&self) -> &TransitionMask {
        &self.mask
    }

    /// Zero-based rows that had no observed transitions and were set uniform.
    pub fn fallback_rows(&self) -> &[usize] {
        &self.fallback_rows
    }

    /// Same chain with states reordered: new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.num_states();
        let pi = perm.iter().map(|&p| self.pi[p]).collect();
        let a = (0..k)
            .map(|i| (0..k).map(|j| self.a(perm[i], perm[j])).collect())
            .collect();
        let mask = TransitionMask::from_rows(
            (0..k)
                .map(|i| (0..k).map(|j| self.mask.allows(perm[i], perm[j])).collect())
                .collect(),
        )?;
        Self::new(pi, a, mask)
    }
}

/// Count initial states and transitions over all sequences.
pub fn count_transitions(labels: &[StateSequence], num_states: usize) -> Result<TransitionCounts> {
    let k = num_states;
    let mut initial = vec![0u64; k];
    let mut transitions = vec![0u64; k * k];
    for seq in labels {
        seq.validate(k)?;
        if let Some(&first) = seq.0.first() {
            initial[first] += 1;
        }
        for w in seq.0.windows(2) {
            transitions[w[0] * k + w[1]] += 1;
        }
    }
    Ok(TransitionCounts {
        initial,
        transitions,
        num_states: k,
    })
}

/// Maximum-likelihood `pi` and `A` from counts.
pub fn estimate(counts: &TransitionCounts, mask: &TransitionMask) -> Result<TransitionModel> {
    estimate_smoothed(counts, mask, 0.0)
}

/// As [`estimate`], with `alpha` added to every allowed transition count.
pub fn estimate_smoothed(counts: &TransitionCounts, mask: &TransitionMask, alpha: f64) -> Result<TransitionModel> {
    let k = counts.num_states;
    if mask.num_states() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: mask.num_states(),
        });
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("smoothing must be >= 0, got {alpha}")));
    }
    for j in 0..k {
        for kk in 0..k {
            if !mask.allows(j, kk) && counts.transition(j, kk) > 0 {
                return Err(Error::ForbiddenTransition {
                    from: j + 1,
                    to: kk + 1,
                });
            }
        }
    }
    let n_init: u64 = counts.initial.iter().sum();
    if n_init == 0 {
        return Err(Error::InvalidParameter("no sequences to estimate from".into()));
    }
    let pi: Vec<f64> = counts.initial.iter().map(|&c| c as f64 / n_init as f64).collect();

    let mut a = vec![0.0; k * k];
    let mut fallback_rows = Vec::new();
    for j in 0..k {
        let total: f64 = (0..k)
            .filter(|&kk| mask.allows(j, kk))
            .map(|kk| counts.transition(j, kk) as f64 + alpha)
            .sum();
        let allowed = mask.allowed_in_row(j);
        for kk in 0..k {
            if !mask.allows(j, kk) {
                continue;
            }
            a[j * k + kk] = if total > 0.0 {
                (counts.transition(j, kk) as f64 + alpha) / total
            } else {
                1.0 / allowed as f64
            };
        }
        if total == 0.0 {
            fallback_rows.push(j);
        }
    }
    Ok(TransitionModel {
        pi,
        a,
        mask: mask.clone(),
        fallback_rows,
    })
}
