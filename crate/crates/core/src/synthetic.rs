//! Sampling from the generative model.
//!
//! All randomness comes from [`ChaCha8Rng`] seeded with a `u64`. Sequences
//! that are generated together get child seeds from [`derive_seed`], so each
//! sequence is reproducible on its own.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{EegSequence, StateSequence};
use crate::emission::EmissionParams;
use crate::error::{Error, Result};
use crate::inference::HmsmmModel;
use crate::markov::{TransitionMask, TransitionModel};

/// Generator used for every draw in this crate.
pub type SynthRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SynthRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `child_seed = first 8 bytes (LE) of SHA-256(master_seed LE || index LE)`.
pub fn derive_seed(master_seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// `u ~ InvGamma(a, b)`, drawn as `b / Gamma(a, 1)`.
pub fn sample_inverse_gamma(a: f64, b: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "inverse-gamma parameters must be positive, got ({a}, {b})"
        )));
    }
    let gamma = Gamma::new(a, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    loop {
        // A tiny shape can underflow the gamma draw to zero.
        let g: f64 = gamma.sample(rng);
        if g > 0.0 {
            return Ok(b / g);
        }
    }
}

/// One draw `x ~ N(mu, u Sigma)` with `u ~ InvGamma(nu/2, nu/2)`. Returns `(x, u)`.
pub fn sample_student_t(params: &EmissionParams, rng: &mut impl Rng) -> (Vec<f64>, f64) {
    let half = 0.5 * params.nu();
    let u = sample_inverse_gamma(half, half, rng).expect("validated nu");
    let x = sample_scaled_gaussian(params, u, rng);
    (x, u)
}

fn sample_scaled_gaussian(params: &EmissionParams, u: f64, rng: &mut impl Rng) -> Vec<f64> {
    let d = params.dim();
    let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mut x = vec![0.0; d];
    params.factor().mul_lower(&z, &mut x);
    let s = u.sqrt();
    x.iter_mut().zip(params.mu()).for_each(|(xi, m)| *xi = m + s * *xi);
    x
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &pk) in p.iter().enumerate() {
        if pk > 0.0 {
            acc += pk;
            last = k;
            if r < acc {
                return k;
            }
        }
    }
    // Rounding left `acc` just under 1; fall back to the last reachable state.
    last
}

/// `z_1 ~ pi`, `z_t | z_t-1 ~ A[z_t-1]`. Zero entries are never drawn.
pub fn sample_state_path(transition: &TransitionModel, len: usize, rng: &mut impl Rng) -> StateSequence {
    let mut path = Vec::with_capacity(len);
    if len == 0 {
        return StateSequence(path);
    }
    let mut z = sample_categorical(transition.pi(), rng);
    path.push(z);
    for _ in 1..len {
        z = sample_categorical(transition.row(z), rng);
        path.push(z);
    }
    StateSequence(path)
}

#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub model: HmsmmModel,
    pub len: usize,
    pub seed: u64,
    /// Use this state path instead of sampling one. Must have length `len`.
    pub forced_path: Option<StateSequence>,
    pub sampling_rate_hz: f64,
}

/// Observations, latent states and latent scales from one generator run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub sequence: EegSequence,
    pub states: StateSequence,
    pub scales: Vec<f64>,
}

pub fn sample_sequence(spec: &GeneratorSpec) -> Result<SampledSequence> {
    if spec.len == 0 {
        return Err(Error::InvalidParameter("sequence length must be at least 1".into()));
    }
    let k = spec.model.num_states();
    let mut rng = rng_from_seed(spec.seed);
    let states = match &spec.forced_path {
        Some(p) => {
            if p.len() != spec.len {
                return Err(Error::DimensionMismatch {
                    expected: spec.len,
                    got: p.len(),
                });
            }
            p.validate(k)?;
            p.clone()
        }
        None => sample_state_path(spec.model.transition(), spec.len, &mut rng),
    };
    let d = spec.model.dim();
    let mut samples = Vec::with_capacity(spec.len * d);
    let mut scales = Vec::with_capacity(spec.len);
    for &z in &states.0 {
        let (x, u) = sample_student_t(&spec.model.emissions()[z], &mut rng);
        samples.extend(x);
        scales.push(u);
    }
    Ok(SampledSequence {
        sequence: EegSequence::new(samples, d, spec.sampling_rate_hz)?,
        states,
        scales,
    })
}

/// A three-state pre-seizure / seizure / post-seizure scenario.
///
/// Every sequence starts pre-seizure, has one seizure, and ends post-seizure.
/// Segment durations are drawn uniformly from the given ranges. Covariances
/// are `scale * R` with `R_ij = correlation^|i-j|` and all means are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeizureScenario {
    pub sequences: usize,
    pub channels: usize,
    pub sampling_rate_hz: f64,
    pub duration_s: f64,
    pub pre_seizure_s: (f64, f64),
    pub seizure_s: (f64, f64),
    pub correlation: f64,
    /// Covariance multipliers for pre-seizure, seizure and post-seizure.
    pub scales: [f64; 3],
    pub nus: [f64; 3],
    /// Probability that a non-seizure sample is replaced by an artifact.
    pub artifact_rate: f64,
    /// Artifacts multiply the whole sample vector by this.
    pub artifact_gain: f64,
}

impl Default for SeizureScenario {
    fn default() -> Self {
        SeizureScenario {
            sequences: 20,
            channels: 8,
            sampling_rate_hz: 500.0,
            duration_s: 300.0,
            pre_seizure_s: (100.0, 200.0),
            seizure_s: (30.0, 70.0),
            correlation: 0.5,
            scales: [1.0, 4.0, 1.5],
            nus: [20.0, 4.0, 10.0],
            artifact_rate: 0.0,
            artifact_gain: 10.0,
        }
    }
}

impl SeizureScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.sequences == 0 || self.channels == 0 {
            return bad("scenario needs at least one sequence and one channel");
        }
        if !(self.sampling_rate_hz > 0.0) || !(self.duration_s > 0.0) {
            return bad("sampling rate and duration must be positive");
        }
        let ranges = [self.pre_seizure_s, self.seizure_s];
        if ranges.iter().any(|&(lo, hi)| !(lo > 0.0 && hi >= lo)) {
            return bad("segment duration ranges must be positive and ordered");
        }
        if self.pre_seizure_s.1 + self.seizure_s.1 >= self.duration_s {
            return bad("pre-seizure and seizure segments must leave room for post-seizure");
        }
        if !(self.correlation.abs() < 1.0) {
            return bad("correlation must lie in (-1, 1)");
        }
        if !(0.0..=1.0).contains(&self.artifact_rate) || !(self.artifact_gain > 0.0) {
            return bad("artifact rate must lie in [0, 1] and gain must be positive");
        }
        Ok(())
    }

    pub fn samples_per_sequence(&self) -> usize {
        (self.duration_s * self.sampling_rate_hz).round() as usize
    }

    /// The generating model. Transition rows match the mean segment lengths.
    pub fn model(&self) -> Result<HmsmmModel> {
        self.validate()?;
        let d = self.channels;
        let base: Vec<f64> = (0..d * d)
            .map(|i| self.correlation.powi((i / d).abs_diff(i % d) as i32))
            .collect();
        let emissions = (0..3)
            .map(|k| {
                let sigma = base.iter().map(|v| v * self.scales[k]).collect();
                EmissionParams::new(vec![0.0; d], sigma, self.nus[k])
            })
            .collect::<Result<Vec<_>>>()?;
        let fs = self.sampling_rate_hz;
        let mean_pre = 0.5 * (self.pre_seizure_s.0 + self.pre_seizure_s.1) * fs;
        let mean_sz = 0.5 * (self.seizure_s.0 + self.seizure_s.1) * fs;
        let mean_post = self.duration_s * fs - mean_pre - mean_sz;
        let leave = |n: f64| 1.0 / n.max(1.0);
        let a = vec![
            vec![1.0 - leave(mean_pre), leave(mean_pre), 0.0],
            vec![0.0, 1.0 - leave(mean_sz), leave(mean_sz)],
            vec![leave(mean_post), 0.0, 1.0 - leave(mean_post)],
        ];
        let transition = TransitionModel::new(vec![1.0, 0.0, 0.0], a, TransitionMask::seizure_cycle(3)?)?;
        HmsmmModel::new(transition, emissions)
    }

    /// Sequence `index` of the dataset for `master_seed`.
    pub fn generate_one(&self, model: &HmsmmModel, master_seed: u64, index: usize) -> Result<SampledSequence> {
        let seed = derive_seed(master_seed, index as u64);
        let mut rng = rng_from_seed(seed);
        let fs = self.sampling_rate_hz;
        let len = self.samples_per_sequence();
        let pre = (rng.random_range(self.pre_seizure_s.0..=self.pre_seizure_s.1) * fs).round() as usize;
        let sz = (rng.random_range(self.seizure_s.0..=self.seizure_s.1) * fs).round() as usize;
        let mut path = vec![0usize; len];
        path[pre..pre + sz].fill(1);
        path[pre + sz..].fill(2);
        let mut out = sample_sequence(&GeneratorSpec {
            model: model.clone(),
            len,
            seed: rng.random(),
            forced_path: Some(StateSequence(path)),
            sampling_rate_hz: fs,
        })?;
        if self.artifact_rate > 0.0 {
            let d = self.channels;
            let mut samples = out.sequence.as_slice().to_vec();
            for (t, &z) in out.states.0.iter().enumerate() {
                if z != 1 && rng.random_bool(self.artifact_rate) {
                    samples[t * d..(t + 1) * d]
                        .iter_mut()
                        .for_each(|v| *v *= self.artifact_gain);
                }
            }
            out.sequence = out.sequence.with_samples(samples);
        }
        Ok(out)
    }

    pub fn generate(&self, master_seed: u64) -> Result<Vec<SampledSequence>> {
        let model = self.model()?;
        (0..self.sequences)
            .map(|i| self.generate_one(&model, master_seed, i))
            .collect()
    }
}
