//! Band-pass filter bank, first-window amplitude normalization and RMS
//! features.
//!
//! Each band is a 4th-order Butterworth band-pass designed like
//! `scipy.signal.butter(4, [lo, hi], btype="bandpass", output="sos")`
//! (four biquads) and applied forward and backward like `sosfiltfilt`:
//! odd reflection padding of `3 * (2 * sections + 1)` samples and steady-state
//! initial conditions.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::EegSequence;
use crate::error::{Error, Result};

const BUTTER_ORDER: usize = 4;

/// A named frequency band. Without edges the band passes the signal through
/// unfiltered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high_hz: Option<f64>,
}

impl BandSpec {
    pub fn new(name: &str, low_hz: f64, high_hz: f64) -> Self {
        BandSpec {
            name: name.to_string(),
            low_hz: Some(low_hz),
            high_hz: Some(high_hz),
        }
    }

    pub fn passthrough(name: &str) -> Self {
        BandSpec {
            name: name.to_string(),
            low_hz: None,
            high_hz: None,
        }
    }

    /// delta 1-3, theta 4-7, alpha 8-12, beta 13-24, gamma 25-80 Hz.
    pub fn defaults() -> Vec<BandSpec> {
        vec![
            BandSpec::new("delta", 1.0, 3.0),
            BandSpec::new("theta", 4.0, 7.0),
            BandSpec::new("alpha", 8.0, 12.0),
            BandSpec::new("beta", 13.0, 24.0),
            BandSpec::new("gamma", 25.0, 80.0),
        ]
    }

    pub fn edges(&self) -> Option<(f64, f64)> {
        self.low_hz.zip(self.high_hz)
    }

    pub fn validate(&self, sampling_rate_hz: f64) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidParameter("band name is empty".into()));
        }
        match (self.low_hz, self.high_hz) {
            (None, None) => Ok(()),
            (Some(lo), Some(hi)) if lo > 0.0 && lo < hi && hi < 0.5 * sampling_rate_hz => Ok(()),
            _ => Err(Error::InvalidParameter(format!(
                "band {} needs 0 < low < high < {} Hz (got {:?}..{:?})",
                self.name,
                0.5 * sampling_rate_hz,
                self.low_hz,
                self.high_hz
            ))),
        }
    }
}

/// One biquad `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
pub type Section = [f64; 6];

/// Digital Butterworth band-pass of the given analog order as second-order
/// sections.
pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, sampling_rate_hz: f64) -> Result<Vec<Section>> {
    BandSpec::new("band", low_hz, high_hz).validate(sampling_rate_hz)?;
    if order == 0 {
        return Err(Error::InvalidParameter("filter order must be positive".into()));
    }
    // Pre-warp the edges for a bilinear transform at a normalized rate of 2.
    let fs = 2.0;
    let warp = |f: f64| 2.0 * fs * (std::f64::consts::PI * (2.0 * f / sampling_rate_hz) / fs).tan();
    let (w1, w2) = (warp(low_hz), warp(high_hz));
    let bw = w2 - w1;
    let wo = (w1 * w2).sqrt();

    // Analog low-pass prototype poles, unit gain, no zeros.
    let n = order as i64;
    let proto: Vec<Complex64> = (0..order as i64)
        .map(|i| {
            let m = (-n + 1 + 2 * i) as f64;
            -Complex64::from_polar(1.0, std::f64::consts::PI * m / (2.0 * order as f64))
        })
        .collect();

    // Low-pass to band-pass: each pole splits in two; `order` zeros at s = 0.
    let mut poles = Vec::with_capacity(2 * order);
    for p in &proto {
        let p_lp = p * (bw / 2.0);
        let root = (p_lp * p_lp - wo * wo).sqrt();
        poles.push(p_lp + root);
        poles.push(p_lp - root);
    }
    let mut gain = bw.powi(order as i32);

    // Bilinear transform: zeros at s = 0 map to z = 1, the remaining
    // `order` zeros at infinity map to z = -1.
    let fs2 = Complex64::new(2.0 * fs, 0.0);
    let mut num = Complex64::new(1.0, 0.0);
    for _ in 0..order {
        num *= fs2;
    }
    let mut den = Complex64::new(1.0, 0.0);
    for p in &poles {
        den *= fs2 - p;
    }
    gain *= (num / den).re;
    let zpoles: Vec<Complex64> = poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();

    Ok(pair_sections(zpoles, order, gain))
}

/// Group poles into conjugate pairs and give each pair two zeros of the same
/// sign, nearest first; sections are ordered so the pole pair closest to the
/// unit circle comes last and the gain sits in the first section.
fn pair_sections(poles: Vec<Complex64>, zeros_each_side: usize, gain: f64) -> Vec<Section> {
    let mut upper: Vec<Complex64> = poles.iter().copied().filter(|p| p.im >= 0.0).collect();
    let mut lower: Vec<Complex64> = poles.iter().copied().filter(|p| p.im < 0.0).collect();
    // Purely real poles show up in `upper` only; pair them among themselves.
    let mut pairs: Vec<(Complex64, Complex64)> = Vec::new();
    upper.sort_by(|a, b| a.im.total_cmp(&b.im));
    let mut reals: Vec<Complex64> = upper.iter().copied().filter(|p| p.im == 0.0).collect();
    upper.retain(|p| p.im != 0.0);
    for p in upper {
        let idx = (0..lower.len())
            .min_by(|&i, &j| (lower[i] - p.conj()).norm().total_cmp(&(lower[j] - p.conj()).norm()))
            .expect("conjugate pole");
        let q = lower.swap_remove(idx);
        pairs.push((p, q));
    }
    reals.sort_by(|a, b| a.re.total_cmp(&b.re));
    for chunk in reals.chunks(2) {
        pairs.push((chunk[0], *chunk.get(1).unwrap_or(&Complex64::new(0.0, 0.0))));
    }
    // Closest to the unit circle first; those sections end up last.
    pairs.sort_by(|a, b| (1.0 - a.0.norm()).abs().total_cmp(&(1.0 - b.0.norm()).abs()));

    let (mut plus, mut minus) = (zeros_each_side, zeros_each_side);
    let mut sections: Vec<Section> = Vec::with_capacity(pairs.len());
    for (p, q) in &pairs {
        let near_plus = (p - 1.0).norm() <= (p + 1.0).norm();
        let z = if (near_plus && plus >= 2) || minus < 2 {
            plus -= 2;
            1.0
        } else {
            minus -= 2;
            -1.0
        };
        let a1 = -(p + q).re;
        let a2 = (p * q).re;
        sections.push([1.0, -2.0 * z, 1.0, 1.0, a1, a2]);
    }
    sections.reverse();
    for v in &mut sections[0][..3] {
        *v *= gain;
    }
    sections
}

/// Complex frequency response of a section cascade at `f_hz`.
pub fn sos_response(sections: &[Section], f_hz: f64, sampling_rate_hz: f64) -> Complex64 {
    let w = 2.0 * std::f64::consts::PI * f_hz / sampling_rate_hz;
    let z1 = Complex64::from_polar(1.0, -w);
    let z2 = z1 * z1;
    sections
        .iter()
        .map(|s| (s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2))
        .product()
}

/// Direct-form-II-transposed cascade filter. `state` holds two values per
/// section and is updated in place.
fn sosfilt(sections: &[Section], x: &mut [f64], state: &mut [[f64; 2]]) {
    for v in x.iter_mut() {
        let mut s = *v;
        for (sec, z) in sections.iter().zip(state.iter_mut()) {
            let y = sec[0] * s + z[0];
            z[0] = sec[1] * s - sec[4] * y + z[1];
            z[1] = sec[2] * s - sec[5] * y;
            s = y;
        }
        *v = s;
    }
}

/// Per-section initial state for a unit step already in steady state.
fn sosfilt_zi(sections: &[Section]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sections
        .iter()
        .map(|s| {
            let (b0, b1, b2, a1, a2) = (s[0], s[1], s[2], s[4], s[5]);
            // Solve [[1 + a1, -1], [a2, 1]] zi = [b1 - a1 b0, b2 - a2 b0].
            let (r0, r1) = (b1 - a1 * b0, b2 - a2 * b0);
            let det = 1.0 + a1 + a2;
            let zi0 = (r0 + r1) / det;
            let zi1 = r1 - a2 * zi0;
            let out = [scale * zi0, scale * zi1];
            scale *= (b0 + b1 + b2) / (1.0 + a1 + a2);
            out
        })
        .collect()
}

/// Zero-phase forward-backward filtering of one channel.
pub fn sosfiltfilt(sections: &[Section], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        // A single sample has no neighbours to reflect; filter it as a constant.
        let mut out = x.to_vec();
        let zi = sosfilt_zi(sections);
        for _ in 0..2 {
            let mut state: Vec<[f64; 2]> = zi.iter().map(|z| [z[0] * out[0], z[1] * out[0]]).collect();
            sosfilt(sections, &mut out, &mut state);
        }
        return out;
    }
    let padlen = (3 * (2 * sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    ext.extend((1..=padlen).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=padlen).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = sosfilt_zi(sections);
    let start = |v: f64| -> Vec<[f64; 2]> { zi.iter().map(|z| [z[0] * v, z[1] * v]).collect() };
    let mut state = start(ext[0]);
    sosfilt(sections, &mut ext, &mut state);
    ext.reverse();
    let mut state = start(ext[0]);
    sosfilt(sections, &mut ext, &mut state);
    ext.reverse();
    ext[padlen..padlen + n].to_vec()
}

/// Filter one sequence into one band. Passthrough bands return a copy.
pub fn filter_band(seq: &EegSequence, band: &BandSpec) -> Result<EegSequence> {
    band.validate(seq.sampling_rate_hz())?;
    let Some((lo, hi)) = band.edges() else {
        return Ok(seq.clone());
    };
    let sections = butter_bandpass(BUTTER_ORDER, lo, hi, seq.sampling_rate_hz())?;
    let columns: Vec<Vec<f64>> = (0..seq.channels())
        .map(|c| sosfiltfilt(&sections, &seq.channel(c)))
        .collect();
    Ok(seq.with_columns(&columns))
}

/// One output sequence per band, same length and channels as the input.
pub fn filter_bank(seq: &EegSequence, bands: &[BandSpec]) -> Result<Vec<EegSequence>> {
    bands.iter().map(|b| filter_band(seq, b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    /// One standard deviation over every channel's first-window samples.
    #[default]
    Pooled,
    PerChannel,
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mut n, mut sum) = (0.0, 0.0);
    for v in values.clone() {
        n += 1.0;
        sum += v;
    }
    let mean = sum / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Divide by the standard deviation of the first `window_s` seconds.
pub fn normalize_first_window(seq: &EegSequence, window_s: f64, mode: NormalizationMode) -> Result<EegSequence> {
    if !(window_s > 0.0) {
        return Err(Error::InvalidParameter("normalization window must be positive".into()));
    }
    let w = (window_s * seq.sampling_rate_hz()).round() as usize;
    if w == 0 || w > seq.len() {
        return Err(Error::InsufficientSamples {
            needed: w.max(1),
            got: seq.len(),
        });
    }
    let d = seq.channels();
    let window = &seq.as_slice()[..w * d];
    let scales: Vec<f64> = match mode {
        NormalizationMode::Pooled => vec![population_std(window.iter().copied()); d],
        NormalizationMode::PerChannel => (0..d)
            .map(|c| population_std(window.iter().skip(c).step_by(d).copied()))
            .collect(),
    };
    if scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::ZeroNormalizationStd);
    }
    let samples = seq
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, v)| v / scales[i % d])
        .collect();
    Ok(seq.with_samples(samples))
}

/// `[t - left, t + right]` bounds of a centered window of `w` samples,
/// truncated to `[0, len)`.
pub(crate) fn centered_window(t: usize, w: usize, len: usize) -> (usize, usize) {
    let left = w / 2;
    let right = w - 1 - left;
    (t.saturating_sub(left), (t + right).min(len - 1))
}

/// Centered moving average with edge truncation, via prefix sums.
///
/// The sums are taken of `x - x[0]`, so a constant input comes back exactly.
pub(crate) fn moving_average(x: &[f64], w: usize) -> Vec<f64> {
    let Some(&origin) = x.first() else {
        return Vec::new();
    };
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in x {
        acc += v - origin;
        prefix.push(acc);
    }
    (0..x.len())
        .map(|t| {
            let (lo, hi) = centered_window(t, w, x.len());
            origin + (prefix[hi + 1] - prefix[lo]) / (hi - lo + 1) as f64
        })
        .collect()
}

/// Window length in samples for `seconds` at `rate_hz`, at least 1.
pub fn window_samples(seconds: f64, rate_hz: f64) -> usize {
    ((seconds * rate_hz).round() as usize).max(1)
}

/// Per-channel centered moving-window root mean square. Same shape as the
/// input.
pub fn rms_feature(seq: &EegSequence, window_s: f64) -> Result<EegSequence> {
    if !(window_s > 0.0) {
        return Err(Error::InvalidParameter("RMS window must be positive".into()));
    }
    let w = window_samples(window_s, seq.sampling_rate_hz());
    let columns: Vec<Vec<f64>> = (0..seq.channels())
        .map(|c| {
            let sq: Vec<f64> = seq.channel(c).iter().map(|v| v * v).collect();
            // Cancellation in the prefix sums can leave tiny negatives.
            moving_average(&sq, w).into_iter().map(|m| m.max(0.0).sqrt()).collect()
        })
        .collect();
    Ok(seq.with_columns(&columns))
}
