//! Pipeline configuration shared by the cross-validation harness and the CLI.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::eval::DetectionConfig;
use crate::markov::TransitionMask;
use crate::signal::{BandSpec, NormalizationMode};
use crate::synthetic::SeizureScenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// pre-seizure -> seizure -> post-seizure -> pre-seizure, plus self-loops.
    #[default]
    SeizureCycle,
    Full,
}

impl MaskKind {
    pub fn build(self, num_states: usize) -> Result<TransitionMask> {
        match self {
            MaskKind::SeizureCycle => TransitionMask::seizure_cycle(num_states),
            MaskKind::Full => Ok(TransitionMask::full(num_states)),
        }
    }
}

/// A model evaluated by the cross-validation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvModel {
    /// Scale-mixture HMM, forward-backward smoothing.
    Hmsmm,
    /// Scale-mixture HMM, forward-only filtering.
    HmsmmFiltering,
    /// Gaussian-emission HMM, forward-backward smoothing.
    Ghmm,
    /// Scale-mixture emissions with fixed class proportions, no dynamics.
    SmmStatic,
}

impl CvModel {
    pub const ALL: [CvModel; 4] = [
        CvModel::Hmsmm,
        CvModel::HmsmmFiltering,
        CvModel::Ghmm,
        CvModel::SmmStatic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CvModel::Hmsmm => "hmsmm",
            CvModel::HmsmmFiltering => "hmsmm-filtering",
            CvModel::Ghmm => "ghmm",
            CvModel::SmmStatic => "smm-static",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub bands: Vec<BandSpec>,
    pub normalization_window_s: f64,
    pub normalization_mode: NormalizationMode,
    pub detection: DetectionConfig,
    pub rms_window_s: f64,
    pub em: EmConfig,
    pub mask: MaskKind,
    pub num_states: usize,
    /// One-based.
    pub seizure_state: usize,
    pub models: Vec<CvModel>,
    pub seed: u64,
    /// Dataset generated by the `synth` subcommand.
    pub scenario: SeizureScenario,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bands: BandSpec::defaults(),
            normalization_window_s: 5.0,
            normalization_mode: NormalizationMode::Pooled,
            detection: DetectionConfig::default(),
            rms_window_s: 2.0,
            em: EmConfig::default(),
            mask: MaskKind::SeizureCycle,
            num_states: 3,
            seizure_state: 2,
            models: CvModel::ALL.to_vec(),
            seed: 0,
            scenario: SeizureScenario::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: PipelineConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.bands.is_empty() {
            return bad("at least one band is required".into());
        }
        let mut names: Vec<&str> = self.bands.iter().map(|b| b.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("band names must be unique".into());
        }
        for (name, w) in [
            ("normalization", self.normalization_window_s),
            ("RMS", self.rms_window_s),
        ] {
            if !(w > 0.0) || !w.is_finite() {
                return bad(format!("{name} window must be positive"));
            }
        }
        self.detection.validate()?;
        self.em.validate()?;
        if self.num_states == 0 {
            return bad("num_states must be positive".into());
        }
        if !(1..=self.num_states).contains(&self.seizure_state) {
            return Err(Error::LabelOutOfRange {
                label: self.seizure_state,
                k: self.num_states,
            });
        }
        self.mask.build(self.num_states)?;
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        self.scenario.validate()
    }

    /// Zero-based seizure state.
    pub fn seizure_index(&self) -> usize {
        self.seizure_state - 1
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(serde_json::to_vec(&value).expect("value serializes")))
    }
}
