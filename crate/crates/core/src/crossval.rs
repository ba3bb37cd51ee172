//! Leave-one-sequence-out cross-validation.
//!
//! Each sequence is one fold. For every fold and band the models are trained
//! on the remaining sequences only and scored on the held-out one.

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{fit_gaussian_state, smm_static_posterior, GhmmModel, StaticPrior};
use crate::config::{CvModel, PipelineConfig};
use crate::data::{EegSequence, StateSequence};
use crate::em::{fit_partitions, EmTrace};
use crate::emission::EmissionParams;
use crate::error::{Error, Result};
use crate::eval::{evaluate_sequence, MetricsReport};
use crate::inference::{filter_from_log_likelihoods, posterior_from_log_likelihoods, HmsmmModel, PosteriorSequence};
use crate::io::{data_checksum, DataChecksum};
use crate::markov::{count_transitions, estimate};
use crate::signal::{filter_band, normalize_first_window, BandSpec};

/// One labeled recording.
#[derive(Debug, Clone)]
pub struct CvInput {
    pub id: String,
    pub sequence: EegSequence,
    pub labels: StateSequence,
}

/// Band-pass filter then normalize by the first window.
pub fn preprocess(seq: &EegSequence, band: &BandSpec, config: &PipelineConfig) -> Result<EegSequence> {
    let filtered = filter_band(seq, band)?;
    normalize_first_window(&filtered, config.normalization_window_s, config.normalization_mode)
}

/// Everything fitted from one training set.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub hmsmm: HmsmmModel,
    pub ghmm: GhmmModel,
    pub static_prior: StaticPrior,
    pub em_traces: Vec<EmTrace>,
}

impl TrainedModels {
    pub fn smm_emissions(&self) -> &[EmissionParams] {
        self.hmsmm.emissions()
    }

    /// Posterior of `model` on an already preprocessed sequence.
    pub fn posteriors(&self, x: &EegSequence, models: &[CvModel]) -> Result<Vec<(CvModel, PosteriorSequence)>> {
        let needs_t = models
            .iter()
            .any(|m| matches!(m, CvModel::Hmsmm | CvModel::HmsmmFiltering));
        let ll = if needs_t {
            Some(self.hmsmm.log_likelihoods(x)?)
        } else {
            None
        };
        models
            .iter()
            .map(|&m| {
                let post = match m {
                    CvModel::Hmsmm => posterior_from_log_likelihoods(self.hmsmm.transition(), ll.as_ref().unwrap())?,
                    CvModel::HmsmmFiltering => {
                        filter_from_log_likelihoods(self.hmsmm.transition(), ll.as_ref().unwrap())?
                    }
                    CvModel::Ghmm => {
                        posterior_from_log_likelihoods(self.ghmm.transition(), &self.ghmm.log_likelihoods(x)?)?
                    }
                    CvModel::SmmStatic => smm_static_posterior(self.smm_emissions(), &self.static_prior, x)?,
                };
                Ok((m, post))
            })
            .collect()
    }
}

/// Fit transitions, scale-mixture and Gaussian emissions, and the static
/// prior from preprocessed training sequences.
pub fn train_models(
    sequences: &[&EegSequence],
    labels: &[&StateSequence],
    config: &PipelineConfig,
) -> Result<TrainedModels> {
    let k = config.num_states;
    let owned_labels: Vec<StateSequence> = labels.iter().map(|&l| l.clone()).collect();
    for (s, l) in sequences.iter().zip(labels) {
        if s.len() != l.len() {
            return Err(Error::DimensionMismatch {
                expected: s.len(),
                got: l.len(),
            });
        }
        l.validate(k)?;
    }
    let counts = count_transitions(&owned_labels, k)?;
    let transition = estimate(&counts, &config.mask.build(k)?)?;

    let mut partitions: Vec<Vec<&[f64]>> = vec![Vec::new(); k];
    for (seq, lab) in sequences.iter().zip(labels) {
        for (row, &z) in seq.rows().zip(&lab.0) {
            partitions[z].push(row);
        }
    }
    let fitted = fit_partitions(&partitions, &config.em)?;
    let gaussians = partitions
        .iter()
        .map(|p| fit_gaussian_state(p))
        .collect::<Result<Vec<_>>>()?;
    let (emissions, em_traces): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    Ok(TrainedModels {
        hmsmm: HmsmmModel::new(transition.clone(), emissions)?,
        ghmm: GhmmModel::new(transition, gaussians)?,
        static_prior: StaticPrior::from_labels(&owned_labels, k)?,
        em_traces,
    })
}

/// Short record of one state's EM fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmSummary {
    pub iterations: usize,
    pub converged: bool,
    pub nu_clamped: bool,
    pub nu: f64,
    pub worst_decrease: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandResult {
    pub band: String,
    pub metrics: Vec<(CvModel, MetricsReport)>,
    pub em: Vec<EmSummary>,
}

impl BandResult {
    pub fn metrics_for(&self, model: CvModel) -> Option<&MetricsReport> {
        self.metrics.iter().find(|(m, _)| *m == model).map(|(_, r)| r)
    }
}

/// Outcome for one held-out sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvFoldResult {
    pub fold: String,
    pub held_out_checksum: String,
    pub training_data: Vec<DataChecksum>,
    pub bands: Vec<BandResult>,
    /// Band with the highest MCC of the selection model; ties go to the
    /// earlier band.
    pub best_band: String,
}

/// Mean and sample standard deviation over the folds where a metric is
/// defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined_folds: usize,
}

impl MetricSummary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        let mean = (n > 0).then(|| v.iter().sum::<f64>() / n as f64);
        let std = mean
            .filter(|_| n > 1)
            .map(|m| (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt());
        MetricSummary {
            mean,
            std,
            defined_folds: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub model: CvModel,
    pub band: String,
    pub folds: usize,
    pub sensitivity: MetricSummary,
    pub specificity: MetricSummary,
    pub mcc: MetricSummary,
    pub auc_roc: MetricSummary,
    pub auc_pr: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub config_hash: String,
    pub selection_model: CvModel,
    pub folds: Vec<CvFoldResult>,
    pub summary: Vec<SummaryRow>,
    /// Folds per band won, in band order.
    pub best_band_counts: Vec<(String, usize)>,
}

pub const METRIC_NAMES: [&str; 5] = ["sensitivity", "specificity", "mcc", "auc_roc", "auc_pr"];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.17e}"))
}

impl CvReport {
    pub fn summary_row(&self, model: CvModel, band: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.model == model && r.band == band)
    }

    /// Mean over folds of `model`'s MCC in `band`.
    pub fn mean_mcc(&self, model: CvModel, band: &str) -> Option<f64> {
        self.summary_row(model, band).and_then(|r| r.mcc.mean)
    }

    /// `model,band,fold,sensitivity,specificity,mcc,auc_roc,auc_pr`.
    /// Undefined values are empty cells.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("model,band,fold,");
        out.push_str(&METRIC_NAMES.join(","));
        out.push('\n');
        for fold in &self.folds {
            for band in &fold.bands {
                for (model, m) in &band.metrics {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        model.name(),
                        band.band,
                        fold.fold,
                        cell(m.sensitivity),
                        cell(m.specificity),
                        cell(Some(m.mcc)),
                        cell(m.auc_roc),
                        cell(m.auc_pr)
                    ));
                }
            }
        }
        out
    }

    /// One row per (model, band) with mean and std of each metric.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("model,band,folds");
        for name in METRIC_NAMES {
            out.push_str(&format!(",{name}_mean,{name}_std"));
        }
        out.push('\n');
        for r in &self.summary {
            out.push_str(&format!("{},{},{}", r.model.name(), r.band, r.folds));
            for s in [r.sensitivity, r.specificity, r.mcc, r.auc_roc, r.auc_pr] {
                out.push_str(&format!(",{},{}", cell(s.mean), cell(s.std)));
            }
            out.push('\n');
        }
        out
    }

    /// `band,folds_with_best_mcc`.
    pub fn best_band_csv(&self) -> String {
        let mut out = String::from("band,folds_with_best_mcc\n");
        for (band, n) in &self.best_band_counts {
            out.push_str(&format!("{band},{n}\n"));
        }
        out
    }
}

fn fold_error(id: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Fold {
        fold: id.to_string(),
        source: Box::new(e),
    }
}

/// Run every fold and aggregate.
pub fn run_crossval(inputs: &[CvInput], config: &PipelineConfig) -> Result<CvReport> {
    config.validate()?;
    if inputs.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: inputs.len(),
        });
    }
    let mut ids: Vec<&str> = inputs.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidParameter(format!("duplicate sequence id {:?}", w[0])));
    }
    for input in inputs {
        if input.sequence.len() != input.labels.len() {
            return Err(fold_error(&input.id)(Error::DimensionMismatch {
                expected: input.sequence.len(),
                got: input.labels.len(),
            }));
        }
        input
            .labels
            .validate(config.num_states)
            .map_err(fold_error(&input.id))?;
    }
    let checksums: Vec<DataChecksum> = inputs
        .iter()
        .map(|i| DataChecksum {
            id: i.id.clone(),
            sha256: data_checksum(&i.sequence, Some(&i.labels)),
        })
        .collect();

    // prepared[band][sequence]
    let prepared: Vec<Vec<EegSequence>> = config
        .bands
        .iter()
        .map(|band| {
            inputs
                .par_iter()
                .map(|i| preprocess(&i.sequence, band, config).map_err(fold_error(&i.id)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let selection_model = if config.models.contains(&CvModel::Hmsmm) {
        CvModel::Hmsmm
    } else {
        config.models[0]
    };
    let seizure = config.seizure_index();

    let folds = (0..inputs.len())
        .into_par_iter()
        .map(|held| {
            let id = &inputs[held].id;
            let train_idx: Vec<usize> = (0..inputs.len()).filter(|&j| j != held).collect();
            let bands = config
                .bands
                .iter()
                .zip(&prepared)
                .map(|(band, seqs)| {
                    let train_x: Vec<&EegSequence> = train_idx.iter().map(|&j| &seqs[j]).collect();
                    let train_z: Vec<&StateSequence> = train_idx.iter().map(|&j| &inputs[j].labels).collect();
                    let trained = train_models(&train_x, &train_z, config)?;
                    let x = &seqs[held];
                    let metrics = trained
                        .posteriors(x, &config.models)?
                        .into_iter()
                        .map(|(m, post)| {
                            let (_, report) = evaluate_sequence(
                                &post,
                                &inputs[held].labels,
                                seizure,
                                x.sampling_rate_hz(),
                                &config.detection,
                            )?;
                            Ok((m, report))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let em = trained
                        .em_traces
                        .iter()
                        .zip(trained.hmsmm.emissions())
                        .map(|(t, e)| EmSummary {
                            iterations: t.iterations,
                            converged: t.converged,
                            nu_clamped: t.nu_clamped,
                            nu: e.nu(),
                            worst_decrease: t.worst_decrease(),
                        })
                        .collect();
                    Ok(BandResult {
                        band: band.name.clone(),
                        metrics,
                        em,
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(fold_error(id))?;
            let mut best = 0;
            for (b, r) in bands.iter().enumerate() {
                let score = |r: &BandResult| r.metrics_for(selection_model).map_or(f64::NEG_INFINITY, |m| m.mcc);
                if score(r) > score(&bands[best]) {
                    best = b;
                }
            }
            let training_data: Vec<DataChecksum> = train_idx.iter().map(|&j| checksums[j].clone()).collect();
            debug_assert!(training_data.iter().all(|c| &c.id != id));
            Ok(CvFoldResult {
                fold: id.clone(),
                held_out_checksum: checksums[held].sha256.clone(),
                training_data,
                best_band: bands[best].band.clone(),
                bands,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut summary = Vec::new();
    for &model in &config.models {
        for (b, band) in config.bands.iter().enumerate() {
            let reports: Vec<&MetricsReport> = folds.iter().filter_map(|f| f.bands[b].metrics_for(model)).collect();
            summary.push(SummaryRow {
                model,
                band: band.name.clone(),
                folds: reports.len(),
                sensitivity: MetricSummary::of(reports.iter().map(|r| r.sensitivity)),
                specificity: MetricSummary::of(reports.iter().map(|r| r.specificity)),
                mcc: MetricSummary::of(reports.iter().map(|r| Some(r.mcc))),
                auc_roc: MetricSummary::of(reports.iter().map(|r| r.auc_roc)),
                auc_pr: MetricSummary::of(reports.iter().map(|r| r.auc_pr)),
            });
        }
    }
    let best_band_counts = config
        .bands
        .iter()
        .map(|b| (b.name.clone(), folds.iter().filter(|f| f.best_band == b.name).count()))
        .collect();
    Ok(CvReport {
        config_hash: config.hash(),
        selection_model,
        folds,
        summary,
        best_band_counts,
    })
}
