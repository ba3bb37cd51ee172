//! File formats: sequence CSV, label JSON, model JSON.
//!
//! Every writer reads its output back and checks it before returning.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::baselines::{GaussianEmissionParams, GhmmModel, StaticPrior};
use crate::data::{EegSequence, StateSequence};
use crate::emission::EmissionParams;
use crate::error::{Error, Result};
use crate::inference::{HmsmmModel, PosteriorSequence};
use crate::markov::{TransitionMask, TransitionModel};

pub const MODEL_FORMAT: u32 = 1;
const RATE_KEY: &str = "sampling_rate_hz";

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// `x.csv` -> `x.meta.json`, holding `{"sampling_rate_hz": ...}`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn rate_from_comments(text: &str, path: &Path) -> Result<Option<f64>> {
    for line in text.lines().take_while(|l| l.trim_start().starts_with('#')) {
        let body = line.trim_start().trim_start_matches('#').trim();
        if let Some(v) = body
            .strip_prefix(RATE_KEY)
            .and_then(|r| r.trim_start().strip_prefix('='))
        {
            let rate: f64 = v
                .trim()
                .parse()
                .map_err(|_| format_err(path, format!("bad sampling rate {:?}", v.trim())))?;
            return Ok(Some(rate));
        }
    }
    Ok(None)
}

fn rate_from_sidecar(path: &Path) -> Result<Option<f64>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let v: Value = serde_json::from_str(&fs::read_to_string(&side)?)?;
    v.get(RATE_KEY)
        .and_then(Value::as_f64)
        .map(Some)
        .ok_or_else(|| format_err(&side, format!("missing numeric {RATE_KEY}")))
}

/// Parse a sequence CSV.
///
/// Leading `#` lines are comments; `# sampling_rate_hz=<v>` sets the rate,
/// otherwise it is taken from the sidecar file. The header names the
/// channels; a first column named `t` is an index and is ignored.
pub fn read_sequence_csv(path: &Path) -> Result<EegSequence> {
    let text = fs::read_to_string(path)?;
    let rate = match rate_from_comments(&text, path)? {
        Some(r) => r,
        None => rate_from_sidecar(path)?.ok_or_else(|| {
            format_err(
                path,
                format!("missing sampling rate (# {RATE_KEY}=<v> line or sidecar)"),
            )
        })?,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| format_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let skip = usize::from(header.first().is_some_and(|h| h.eq_ignore_ascii_case("t")));
    let names: Vec<String> = header[skip..].to_vec();
    if names.is_empty() {
        return Err(format_err(path, "no channel columns"));
    }
    let d = names.len();
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let csv_err = |line: usize, msg: String| Error::Csv {
            path: path.to_path_buf(),
            row,
            line,
            msg,
        };
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != d + skip {
            return Err(csv_err(
                line,
                format!("expected {} fields, found {}", d + skip, record.len()),
            ));
        }
        for field in record.iter().skip(skip) {
            let v: f64 = field
                .parse()
                .map_err(|_| csv_err(line, format!("cannot parse {field:?} as a number")))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("non-finite value {field:?}")));
            }
            samples.push(v);
        }
    }
    if samples.is_empty() {
        return Err(format_err(path, "no samples"));
    }
    EegSequence::new(samples, d, rate)?.with_channel_names(names)
}

fn sequence_csv_text(seq: &EegSequence) -> String {
    let d = seq.channels();
    let names: Vec<String> = match seq.channel_names() {
        Some(n) => n.to_vec(),
        None => (1..=d).map(|c| format!("ch{c}")).collect(),
    };
    let mut out = String::with_capacity(seq.len() * d * 25);
    out.push_str(&format!("# {RATE_KEY}={}\n", seq.sampling_rate_hz()));
    out.push('t');
    for n in &names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (t, row) in seq.rows().enumerate() {
        out.push_str(&t.to_string());
        for v in row {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    out
}

/// Write values at 17 significant digits with a rate comment line.
pub fn write_sequence_csv(path: &Path, seq: &EegSequence) -> Result<()> {
    fs::write(path, sequence_csv_text(seq))?;
    let back = read_sequence_csv(path)?;
    if back.as_slice() != seq.as_slice() || back.sampling_rate_hz() != seq.sampling_rate_hz() {
        return Err(format_err(path, "re-read sequence differs from what was written"));
    }
    Ok(())
}

/// Posterior probabilities as a CSV with columns `t,p1..pK`.
pub fn write_posterior_csv(path: &Path, posterior: &PosteriorSequence, sampling_rate_hz: f64) -> Result<()> {
    let k = posterior.num_states();
    let names = (1..=k).map(|s| format!("p{s}")).collect();
    let seq = EegSequence::new(posterior.as_slice().to_vec(), k, sampling_rate_hz)?.with_channel_names(names)?;
    write_sequence_csv(path, &seq)
}

/// Inverse of [`write_posterior_csv`]. Returns the posterior and the rate.
pub fn read_posterior_csv(path: &Path) -> Result<(PosteriorSequence, f64)> {
    let seq = read_sequence_csv(path)?;
    let post = PosteriorSequence::new(seq.as_slice().to_vec(), seq.channels(), f64::NAN)
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok((post, seq.sampling_rate_hz()))
}

/// One annotated interval, in seconds, half-open `[start_s, end_s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelInterval {
    /// One-based.
    pub state: usize,
    pub start_s: f64,
    pub end_s: f64,
}

/// Contents of a label file.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelAnnotation {
    /// One-based label per sample.
    States(Vec<usize>),
    Intervals {
        intervals: Vec<LabelInterval>,
        post_seizure_fill: bool,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLabels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    states: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intervals: Option<Vec<LabelInterval>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    post_seizure_fill: Option<bool>,
}

pub fn parse_labels_json(text: &str, path: &Path) -> Result<LabelAnnotation> {
    let raw: RawLabels = serde_json::from_str(text)?;
    match (raw.states, raw.intervals) {
        (Some(s), None) if raw.post_seizure_fill.is_none() => Ok(LabelAnnotation::States(s)),
        (None, Some(intervals)) => Ok(LabelAnnotation::Intervals {
            intervals,
            post_seizure_fill: raw.post_seizure_fill.unwrap_or(true),
        }),
        _ => Err(format_err(path, "expected exactly one of \"states\" or \"intervals\"")),
    }
}

pub fn read_labels_json(path: &Path) -> Result<LabelAnnotation> {
    parse_labels_json(&fs::read_to_string(path)?, path)
}

/// First sample index whose time `t / rate` is at or after `seconds`.
fn first_sample_at(seconds: f64, rate: f64) -> usize {
    let mut t = (seconds * rate).ceil().max(0.0) as usize;
    while t > 0 && (t - 1) as f64 / rate >= seconds {
        t -= 1;
    }
    while (t as f64) / rate < seconds {
        t += 1;
    }
    t
}

impl LabelAnnotation {
    /// Per-sample labels for a sequence of `len` samples.
    ///
    /// Samples outside every interval get state 1. With `post_seizure_fill`,
    /// the gap after a `seizure_state` interval (up to the next interval or
    /// the end) gets `seizure_state + 1` instead.
    pub fn expand(
        &self,
        len: usize,
        sampling_rate_hz: f64,
        num_states: usize,
        seizure_state: usize,
    ) -> Result<StateSequence> {
        match self {
            LabelAnnotation::States(s) => {
                if s.len() != len {
                    return Err(Error::DimensionMismatch {
                        expected: len,
                        got: s.len(),
                    });
                }
                StateSequence::from_one_based(s, num_states)
            }
            LabelAnnotation::Intervals {
                intervals,
                post_seizure_fill,
            } => {
                let duration = len as f64 / sampling_rate_hz;
                let mut spans: Vec<(usize, usize, usize)> = Vec::with_capacity(intervals.len());
                for iv in intervals {
                    if !(1..=num_states).contains(&iv.state) {
                        return Err(Error::LabelOutOfRange {
                            label: iv.state,
                            k: num_states,
                        });
                    }
                    if !(iv.start_s >= 0.0 && iv.start_s < iv.end_s) {
                        return Err(Error::InvalidParameter(format!(
                            "interval [{}, {}) is empty or negative",
                            iv.start_s, iv.end_s
                        )));
                    }
                    if iv.end_s > duration {
                        return Err(Error::InvalidParameter(format!(
                            "interval ends at {} s, beyond the sequence end at {duration} s",
                            iv.end_s
                        )));
                    }
                    let lo = first_sample_at(iv.start_s, sampling_rate_hz).min(len);
                    let hi = first_sample_at(iv.end_s, sampling_rate_hz).min(len);
                    spans.push((lo, hi, iv.state - 1));
                }
                spans.sort_by_key(|s| (s.0, s.1));
                if let Some(w) = spans.windows(2).find(|w| w[1].0 < w[0].1) {
                    return Err(Error::InvalidParameter(format!(
                        "intervals overlap at sample {}",
                        w[1].0
                    )));
                }
                let seizure = seizure_state - 1;
                let fill = *post_seizure_fill && spans.iter().any(|s| s.2 == seizure);
                if fill && seizure_state >= num_states {
                    return Err(Error::InvalidParameter(
                        "post-seizure fill needs a state after the seizure state".into(),
                    ));
                }
                let mut labels = vec![0usize; len];
                for (i, &(lo, hi, state)) in spans.iter().enumerate() {
                    labels[lo..hi].fill(state);
                    if fill && state == seizure {
                        let next = spans.get(i + 1).map_or(len, |s| s.0);
                        labels[hi..next].fill(seizure + 1);
                    }
                }
                Ok(StateSequence(labels))
            }
        }
    }
}

/// Per-sample labels as `{"states": [...]}`, one-based.
pub fn write_labels_json(path: &Path, labels: &StateSequence) -> Result<()> {
    let raw = RawLabels {
        states: Some(labels.to_one_based()),
        intervals: None,
        post_seizure_fill: None,
    };
    fs::write(path, serde_json::to_string(&raw)?)?;
    if read_labels_json(path)? != LabelAnnotation::States(labels.to_one_based()) {
        return Err(format_err(path, "re-read labels differ from what was written"));
    }
    Ok(())
}

/// Hex SHA-256 over the rate, shape, samples and (if given) labels.
pub fn data_checksum(seq: &EegSequence, labels: Option<&StateSequence>) -> String {
    let mut h = Sha256::new();
    h.update(seq.sampling_rate_hz().to_le_bytes());
    h.update((seq.len() as u64).to_le_bytes());
    h.update((seq.channels() as u64).to_le_bytes());
    for v in seq.as_slice() {
        h.update(v.to_le_bytes());
    }
    if let Some(l) = labels {
        for &z in &l.0 {
            h.update((z as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_checksum(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Hmsmm,
    Ghmm,
    SmmStatic,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Hmsmm => "hmsmm",
            ModelKind::Ghmm => "ghmm",
            ModelKind::SmmStatic => "smm-static",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    Hmsmm(HmsmmModel),
    Ghmm(GhmmModel),
    SmmStatic {
        emissions: Vec<EmissionParams>,
        prior: StaticPrior,
    },
}

impl StoredModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            StoredModel::Hmsmm(_) => ModelKind::Hmsmm,
            StoredModel::Ghmm(_) => ModelKind::Ghmm,
            StoredModel::SmmStatic { .. } => ModelKind::SmmStatic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataChecksum {
    pub id: String,
    pub sha256: String,
}

/// Where a model came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Provenance {
    pub config_hash: String,
    pub band: Option<String>,
    pub training_data: Vec<DataChecksum>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: StoredModel,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEmission {
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nu: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    format: u32,
    kind: ModelKind,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pi: Option<Vec<f64>>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<Vec<bool>>>,
    emissions: Vec<RawEmission>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior: Option<Vec<f64>>,
    provenance: Provenance,
}

fn rows(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(<[f64]>::to_vec).collect()
}

fn raw_t(e: &EmissionParams) -> RawEmission {
    RawEmission {
        mu: e.mu().to_vec(),
        sigma: rows(e.sigma(), e.dim()),
        nu: Some(e.nu()),
    }
}

impl ModelFile {
    fn to_raw(&self) -> RawModel {
        let chain = |t: &TransitionModel| (Some(t.pi().to_vec()), Some(t.a_rows()), Some(t.mask().rows()));
        let (k, d, (pi, a, mask), emissions, prior) = match &self.model {
            StoredModel::Hmsmm(m) => (
                m.num_states(),
                m.dim(),
                chain(m.transition()),
                m.emissions().iter().map(raw_t).collect(),
                None,
            ),
            StoredModel::Ghmm(m) => (
                m.num_states(),
                m.dim(),
                chain(m.transition()),
                m.emissions()
                    .iter()
                    .map(|e| RawEmission {
                        mu: e.mu().to_vec(),
                        sigma: rows(e.sigma(), e.dim()),
                        nu: None,
                    })
                    .collect(),
                None,
            ),
            StoredModel::SmmStatic { emissions, prior } => (
                emissions.len(),
                emissions[0].dim(),
                (None, None, None),
                emissions.iter().map(raw_t).collect(),
                Some(prior.class_proportions().to_vec()),
            ),
        };
        RawModel {
            format: MODEL_FORMAT,
            kind: self.model.kind(),
            k,
            d,
            pi,
            a,
            mask,
            emissions,
            prior,
            provenance: self.provenance.clone(),
        }
    }

    fn from_raw(raw: RawModel, path: &Path) -> Result<Self> {
        let bad = |m: String| format_err(path, m);
        if raw.emissions.len() != raw.k {
            return Err(bad(format!("K = {} but {} emissions", raw.k, raw.emissions.len())));
        }
        for e in &raw.emissions {
            if e.mu.len() != raw.d || e.sigma.len() != raw.d || e.sigma.iter().any(|r| r.len() != raw.d) {
                return Err(bad(format!("emission shapes do not match D = {}", raw.d)));
            }
        }
        let chain = |raw: &RawModel| -> Result<TransitionModel> {
            match (&raw.pi, &raw.a, &raw.mask) {
                (Some(pi), Some(a), Some(mask)) => {
                    TransitionModel::new(pi.clone(), a.clone(), TransitionMask::from_rows(mask.clone())?)
                }
                _ => Err(bad(format!("{} model needs pi, A and mask", raw.kind.name()))),
            }
        };
        let t_emissions = |raw: &RawModel| -> Result<Vec<EmissionParams>> {
            raw.emissions
                .iter()
                .map(|e| {
                    let nu = e.nu.ok_or_else(|| bad("emission is missing nu".into()))?;
                    EmissionParams::new(e.mu.clone(), e.sigma.concat(), nu)
                })
                .collect()
        };
        let model = match raw.kind {
            ModelKind::Hmsmm => StoredModel::Hmsmm(HmsmmModel::new(chain(&raw)?, t_emissions(&raw)?)?),
            ModelKind::Ghmm => {
                let e = raw
                    .emissions
                    .iter()
                    .map(|e| {
                        if e.nu.is_some() {
                            return Err(bad("Gaussian emission must not carry nu".into()));
                        }
                        GaussianEmissionParams::new(e.mu.clone(), e.sigma.concat())
                    })
                    .collect::<Result<Vec<_>>>()?;
                StoredModel::Ghmm(GhmmModel::new(chain(&raw)?, e)?)
            }
            ModelKind::SmmStatic => {
                let prior = raw
                    .prior
                    .clone()
                    .ok_or_else(|| bad("smm-static model needs prior".into()))?;
                StoredModel::SmmStatic {
                    emissions: t_emissions(&raw)?,
                    prior: StaticPrior::new(prior)?,
                }
            }
        };
        Ok(ModelFile {
            model,
            provenance: raw.provenance,
        })
    }
}

fn checksum_of(value: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("value serializes")))
}

/// Save as self-describing JSON with a SHA-256 checksum of the content.
pub fn save_model(path: &Path, model: &ModelFile) -> Result<()> {
    let mut value = serde_json::to_value(model.to_raw())?;
    let sum = checksum_of(&value);
    value
        .as_object_mut()
        .expect("model serializes to an object")
        .insert("checksum".into(), Value::String(sum));
    fs::write(path, serde_json::to_string_pretty(&value)?)?;
    if &load_model(path)? != model {
        return Err(format_err(path, "re-read model differs from what was written"));
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path)?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| format_err(path, format!("parse error: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| format_err(path, "model file is not a JSON object"))?;
    match obj.get("format").and_then(Value::as_u64) {
        Some(v) if v == u64::from(MODEL_FORMAT) => {}
        Some(v) => {
            return Err(format_err(
                path,
                format!("unsupported model format {v} (expected {MODEL_FORMAT})"),
            ))
        }
        None => return Err(format_err(path, "missing model format")),
    }
    let stored = match obj.remove("checksum") {
        Some(Value::String(s)) => s,
        _ => return Err(format_err(path, "missing checksum")),
    };
    if checksum_of(&value) != stored {
        return Err(format_err(path, "checksum mismatch"));
    }
    let raw: RawModel = serde_json::from_value(value).map_err(|e| format_err(path, e.to_string()))?;
    ModelFile::from_raw(raw, path)
}

/// Load and require a particular kind.
pub fn load_model_of_kind(path: &Path, kind: ModelKind) -> Result<ModelFile> {
    let m = load_model(path)?;
    if m.model.kind() != kind {
        return Err(Error::ModelKindMismatch {
            expected: kind.name().into(),
            found: m.model.kind().name().into(),
        });
    }
    Ok(m)
}

pub fn load_hmsmm(path: &Path) -> Result<HmsmmModel> {
    match load_model_of_kind(path, ModelKind::Hmsmm)?.model {
        StoredModel::Hmsmm(m) => Ok(m),
        _ => unreachable!("kind checked"),
    }
}

/// Pretty JSON, written and parsed back.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, &text)?;
    let back: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    if back != serde_json::to_value(value)? {
        return Err(format_err(path, "re-read JSON differs from what was written"));
    }
    Ok(())
}
