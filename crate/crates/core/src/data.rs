//! Observed signals and state labels.

use crate::error::{Error, Result};

/// A `T x D` multichannel recording stored row-major (one row per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct EegSequence {
    samples: Vec<f64>,
    len: usize,
    channels: usize,
    sampling_rate_hz: f64,
    channel_names: Option<Vec<String>>,
}

impl EegSequence {
    pub fn new(samples: Vec<f64>, channels: usize, sampling_rate_hz: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidParameter("sequence needs at least one channel".into()));
        }
        if samples.is_empty() || !samples.len().is_multiple_of(channels) {
            return Err(Error::InvalidParameter(format!(
                "{} values do not form a non-empty T x {channels} matrix",
                samples.len()
            )));
        }
        if !(sampling_rate_hz > 0.0) || !sampling_rate_hz.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sampling rate must be positive, got {sampling_rate_hz}"
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sequence samples"));
        }
        Ok(EegSequence {
            len: samples.len() / channels,
            samples,
            channels,
            sampling_rate_hz,
            channel_names: None,
        })
    }

    /// Build from per-sample rows.
    pub fn from_rows(rows: &[Vec<f64>], sampling_rate_hz: f64) -> Result<Self> {
        let channels = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != channels) {
            return Err(Error::DimensionMismatch {
                expected: channels,
                got: bad.len(),
            });
        }
        Self::new(rows.concat(), channels, sampling_rate_hz)
    }

    pub fn with_channel_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.channels {
            return Err(Error::DimensionMismatch {
                expected: self.channels,
                got: names.len(),
            });
        }
        self.channel_names = Some(names);
        Ok(self)
    }

    /// Number of samples `T`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of channels `D`.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.sampling_rate_hz
    }

    pub fn channel_names(&self) -> Option<&[String]> {
        self.channel_names.as_deref()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.samples[t * self.channels..(t + 1) * self.channels]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.samples.chunks_exact(self.channels)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.rows().map(|r| r[c]).collect()
    }

    /// Same shape and metadata, new values. `samples` must be `T * D` long.
    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Self {
        debug_assert_eq!(samples.len(), self.samples.len());
        EegSequence {
            samples,
            ..self.clone()
        }
    }

    /// Rebuild from per-channel columns, each of length `T`.
    pub(crate) fn with_columns(&self, columns: &[Vec<f64>]) -> Self {
        let mut samples = vec![0.0; self.samples.len()];
        for (c, col) in columns.iter().enumerate() {
            for (t, v) in col.iter().enumerate() {
                samples[t * self.channels + c] = *v;
            }
        }
        self.with_samples(samples)
    }

    /// First `len` samples.
    pub fn prefix(&self, len: usize) -> Self {
        let len = len.clamp(1, self.len);
        self.with_prefix_samples(len)
    }

    fn with_prefix_samples(&self, len: usize) -> Self {
        EegSequence {
            samples: self.samples[..len * self.channels].to_vec(),
            len,
            ..self.clone()
        }
    }
}

/// Hard state labels, stored zero-based (`0..K`). Files and configs use
/// one-based labels; conversion happens at those boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StateSequence(pub Vec<usize>);

impl StateSequence {
    /// From one-based labels, validating the range `1..=k`.
    pub fn from_one_based(labels: &[usize], k: usize) -> Result<Self> {
        labels
            .iter()
            .map(|&l| {
                if (1..=k).contains(&l) {
                    Ok(l - 1)
                } else {
                    Err(Error::LabelOutOfRange { label: l, k })
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(StateSequence)
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.0.iter().map(|s| s + 1).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        match self.0.iter().find(|&&s| s >= k) {
            Some(&s) => Err(Error::LabelOutOfRange { label: s + 1, k }),
            None => Ok(()),
        }
    }
}

/// Sequences with their hard labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub sequences: Vec<EegSequence>,
    pub labels: Vec<StateSequence>,
    pub num_states: usize,
}

impl LabeledDataset {
    pub fn new(sequences: Vec<EegSequence>, labels: Vec<StateSequence>, num_states: usize) -> Result<Self> {
        if sequences.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: sequences.len(),
                got: labels.len(),
            });
        }
        let dim = sequences.first().map_or(0, EegSequence::channels);
        for (seq, lab) in sequences.iter().zip(&labels) {
            if seq.len() != lab.len() {
                return Err(Error::DimensionMismatch {
                    expected: seq.len(),
                    got: lab.len(),
                });
            }
            if seq.channels() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: seq.channels(),
                });
            }
            lab.validate(num_states)?;
        }
        Ok(LabeledDataset {
            sequences,
            labels,
            num_states,
        })
    }

    pub fn dim(&self) -> usize {
        self.sequences.first().map_or(0, EegSequence::channels)
    }

    /// Row slices of every sample labeled `state`, in dataset order.
    pub fn samples_for_state(&self, state: usize) -> Vec<&[f64]> {
        self.sequences
            .iter()
            .zip(&self.labels)
            .flat_map(|(seq, lab)| seq.rows().zip(&lab.0).filter(move |(_, &s)| s == state).map(|(r, _)| r))
            .collect()
    }
}
