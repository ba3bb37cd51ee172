//! `hmsmm` command line: synthesize data, preprocess, train, predict,
//! evaluate and cross-validate.
//!
//! Exit codes: 0 on success, 2 for usage or validation errors, 1 otherwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hmsmm::baselines::{ghmm_filter, ghmm_posterior, smm_static_posterior};
use hmsmm::config::PipelineConfig;
use hmsmm::crossval::{preprocess, run_crossval, train_models, CvInput};
use hmsmm::data::{EegSequence, StateSequence};
use hmsmm::error::Error;
use hmsmm::eval::evaluate_sequence;
use hmsmm::inference::{filter_forward, posterior, PosteriorSequence};
use hmsmm::io::{
    data_checksum, file_checksum, load_model, read_labels_json, read_posterior_csv, read_sequence_csv, save_model,
    write_json, write_labels_json, write_posterior_csv, write_sequence_csv, DataChecksum, ModelFile, Provenance,
    StoredModel, MODEL_FORMAT,
};
use hmsmm::signal::{rms_feature, BandSpec};

#[derive(Parser)]
#[command(
    name = "hmsmm",
    version,
    about = "Seizure detection with a hidden Markov scale mixture model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Dataset {
    /// Directory holding `<name>.csv` with `<name>.labels.json` beside it.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Sequence CSV; repeat for several.
    #[arg(long = "data")]
    data: Vec<PathBuf>,
    /// Label file for each `--data`, in the same order. Defaults to
    /// `<name>.labels.json` next to the CSV.
    #[arg(long = "labels")]
    labels: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Forward-backward over the whole sequence.
    Smoothing,
    /// Forward pass only; each output uses samples up to that time.
    Filtering,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset from the configured scenario.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Band-pass filter and normalize sequences, one file per band.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Also write windowed RMS features.
        #[arg(long)]
        rms: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Fit HMSMM, GHMM and static-SMM models on one band.
    Train {
        #[command(flatten)]
        common: Common,
        /// Band name from the configuration; defaults to the first band.
        #[arg(long)]
        band: Option<String>,
        #[command(flatten)]
        dataset: Dataset,
    },
    /// Write state posteriors for raw sequences using a trained model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "smoothing")]
        mode: Mode,
        /// Band to preprocess with; defaults to the band the model was trained on.
        #[arg(long)]
        band: Option<String>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score posterior files against labels.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Also write per-sample time, probability, decision and truth.
        #[arg(long)]
        plot_data: bool,
        /// Posterior CSV; repeat for several.
        #[arg(long = "posterior", required = true)]
        posteriors: Vec<PathBuf>,
        /// Label file for each `--posterior`, in the same order.
        #[arg(long = "labels", required = true)]
        labels: Vec<PathBuf>,
    },
    /// Leave-one-sequence-out cross-validation over every band and model.
    Crossval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dataset: Dataset,
    },
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Files read and written by one invocation, for the manifest.
struct Run {
    command: &'static str,
    config: PipelineConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
    extra: Vec<(&'static str, Value)>,
}

impl Run {
    fn new(command: &'static str, common: &Common) -> Outcome<Self> {
        let mut config = match &common.config {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                PipelineConfig::from_json(&text)?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        config.validate()?;
        fs::create_dir_all(&common.out)?;
        let mut inputs = Vec::new();
        if let Some(p) = &common.config {
            inputs.push(p.clone());
        }
        Ok(Run {
            command,
            config,
            out: common.out.clone(),
            inputs,
            outputs: Vec::new(),
            extra: Vec::new(),
        })
    }

    /// Path under the output directory, recorded for the manifest.
    fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Outcome<()> {
        let path = self.output(name);
        fs::write(&path, text)?;
        if fs::read_to_string(&path)? != text {
            return Err(Failure::Lib(Error::Format {
                path,
                msg: "re-read file differs from what was written".into(),
            }));
        }
        Ok(())
    }

    fn finish(mut self) -> Outcome<()> {
        let digest = |p: &Path| -> Outcome<Value> {
            Ok(json!({ "path": p.display().to_string(), "sha256": file_checksum(p)? }))
        };
        let inputs = self.inputs.iter().map(|p| digest(p)).collect::<Outcome<Vec<_>>>()?;
        self.outputs.sort();
        self.outputs.dedup();
        let outputs = self
            .outputs
            .iter()
            .map(|name| Ok(json!({ "path": name, "sha256": file_checksum(&self.out.join(name))? })))
            .collect::<Outcome<Vec<_>>>()?;
        let mut manifest = json!({
            "command": self.command,
            "versions": { "hmsmm": env!("CARGO_PKG_VERSION"), "model_format": MODEL_FORMAT },
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "inputs": inputs,
            "outputs": outputs,
        });
        for (key, value) in self.extra.drain(..) {
            manifest[key] = value;
        }
        write_json(&self.out.join("manifest.json"), &manifest)?;
        Ok(())
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned())
}

fn sibling_labels(csv: &Path) -> PathBuf {
    csv.with_file_name(format!("{}.labels.json", stem(csv)))
}

fn find_band<'a>(config: &'a PipelineConfig, name: Option<&str>) -> Outcome<&'a BandSpec> {
    match name {
        None => Ok(&config.bands[0]),
        Some(n) => config.bands.iter().find(|b| b.name == n).ok_or_else(|| {
            Failure::Lib(Error::InvalidParameter(format!(
                "band {n:?} is not in the configuration"
            )))
        }),
    }
}

fn load_labels(path: &Path, seq: &EegSequence, config: &PipelineConfig) -> Outcome<StateSequence> {
    Ok(read_labels_json(path)?.expand(
        seq.len(),
        seq.sampling_rate_hz(),
        config.num_states,
        config.seizure_state,
    )?)
}

/// Resolve `--data-dir` / `--data` / `--labels` into labeled sequences.
fn load_dataset(run: &mut Run, dataset: &Dataset) -> Outcome<Vec<CvInput>> {
    let mut pairs: Vec<(PathBuf, PathBuf)> = Vec::new();
    if let Some(dir) = &dataset.data_dir {
        let mut csvs: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        csvs.sort();
        for csv in csvs {
            let labels = sibling_labels(&csv);
            if !labels.exists() {
                return Err(Failure::Usage(format!(
                    "{} has no label file {}",
                    csv.display(),
                    labels.display()
                )));
            }
            pairs.push((csv, labels));
        }
    }
    if !dataset.labels.is_empty() && dataset.labels.len() != dataset.data.len() {
        return Err(Failure::Usage(format!(
            "{} --data files but {} --labels files",
            dataset.data.len(),
            dataset.labels.len()
        )));
    }
    for (i, csv) in dataset.data.iter().enumerate() {
        let labels = dataset.labels.get(i).cloned().unwrap_or_else(|| sibling_labels(csv));
        pairs.push((csv.clone(), labels));
    }
    if pairs.is_empty() {
        return Err(Failure::Usage("no input sequences (use --data or --data-dir)".into()));
    }
    pairs
        .into_iter()
        .map(|(csv, labels_path)| {
            let sequence = read_sequence_csv(&csv)?;
            let labels = load_labels(&labels_path, &sequence, &run.config)?;
            run.inputs.push(csv.clone());
            run.inputs.push(labels_path);
            Ok(CvInput {
                id: stem(&csv),
                sequence,
                labels,
            })
        })
        .collect()
}

fn synth(common: &Common) -> Outcome<()> {
    let mut run = Run::new("synth", common)?;
    let scenario = run.config.scenario.clone();
    let data = scenario.generate(run.config.seed)?;
    for (i, s) in data.iter().enumerate() {
        let name = format!("seq{i:02}");
        write_sequence_csv(&run.output(&format!("{name}.csv")), &s.sequence)?;
        write_labels_json(&run.output(&format!("{name}.labels.json")), &s.states)?;
    }
    run.extra
        .push(("scenario", serde_json::to_value(&scenario).map_err(Error::from)?));
    run.finish()
}

fn preprocess_cmd(common: &Common, rms: bool, inputs: &[PathBuf]) -> Outcome<()> {
    let mut run = Run::new("preprocess", common)?;
    for input in inputs {
        let seq = read_sequence_csv(input)?;
        run.inputs.push(input.clone());
        let name = stem(input);
        for band in run.config.bands.clone() {
            let x = preprocess(&seq, &band, &run.config)?;
            write_sequence_csv(&run.output(&format!("{name}.{}.csv", band.name)), &x)?;
            if rms {
                let r = rms_feature(&x, run.config.rms_window_s)?;
                write_sequence_csv(&run.output(&format!("{name}.{}.rms.csv", band.name)), &r)?;
            }
        }
    }
    run.finish()
}

fn train(common: &Common, band: Option<&str>, dataset: &Dataset) -> Outcome<()> {
    let mut run = Run::new("train", common)?;
    let inputs = load_dataset(&mut run, dataset)?;
    let band = find_band(&run.config, band)?.clone();
    let prepared = inputs
        .iter()
        .map(|i| preprocess(&i.sequence, &band, &run.config))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<&StateSequence> = inputs.iter().map(|i| &i.labels).collect();
    let trained = train_models(&prepared.iter().collect::<Vec<_>>(), &labels, &run.config)?;
    let provenance = Provenance {
        config_hash: run.config.hash(),
        band: Some(band.name.clone()),
        training_data: inputs
            .iter()
            .map(|i| DataChecksum {
                id: i.id.clone(),
                sha256: data_checksum(&i.sequence, Some(&i.labels)),
            })
            .collect(),
    };
    let models = [
        ("hmsmm.json", StoredModel::Hmsmm(trained.hmsmm.clone())),
        ("ghmm.json", StoredModel::Ghmm(trained.ghmm.clone())),
        (
            "smm-static.json",
            StoredModel::SmmStatic {
                emissions: trained.smm_emissions().to_vec(),
                prior: trained.static_prior.clone(),
            },
        ),
    ];
    for (name, model) in models {
        let file = ModelFile {
            model,
            provenance: provenance.clone(),
        };
        save_model(&run.output(name), &file)?;
    }
    let traces = serde_json::to_value(&trained.em_traces).map_err(Error::from)?;
    write_json(&run.output("em_traces.json"), &traces)?;
    run.finish()
}

fn predict(common: &Common, model_path: &Path, mode: Mode, band: Option<&str>, inputs: &[PathBuf]) -> Outcome<()> {
    let mut run = Run::new("predict", common)?;
    let model = load_model(model_path)?;
    run.inputs.push(model_path.to_path_buf());
    let band_name = band.map(str::to_string).or_else(|| model.provenance.band.clone());
    let band = find_band(&run.config, band_name.as_deref())?.clone();
    for input in inputs {
        let seq = read_sequence_csv(input)?;
        run.inputs.push(input.clone());
        let x = preprocess(&seq, &band, &run.config)?;
        let post: PosteriorSequence = match (&model.model, mode) {
            (StoredModel::Hmsmm(m), Mode::Smoothing) => posterior(m, &x)?,
            (StoredModel::Hmsmm(m), Mode::Filtering) => filter_forward(m, &x)?,
            (StoredModel::Ghmm(m), Mode::Smoothing) => ghmm_posterior(m, &x)?,
            (StoredModel::Ghmm(m), Mode::Filtering) => ghmm_filter(m, &x)?,
            // no temporal coupling, so both modes coincide
            (StoredModel::SmmStatic { emissions, prior }, _) => smm_static_posterior(emissions, prior, &x)?,
        };
        write_posterior_csv(
            &run.output(&format!("{}.posterior.csv", stem(input))),
            &post,
            x.sampling_rate_hz(),
        )?;
    }
    run.extra.push(("band", json!(band.name)));
    run.finish()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.17e}"))
}

fn evaluate(common: &Common, plot_data: bool, posteriors: &[PathBuf], labels: &[PathBuf]) -> Outcome<()> {
    if posteriors.len() != labels.len() {
        return Err(Failure::Usage(format!(
            "{} --posterior files but {} --labels files",
            posteriors.len(),
            labels.len()
        )));
    }
    let mut run = Run::new("evaluate", common)?;
    let mut table = String::from("input,sensitivity,specificity,mcc,auc_roc,auc_pr,tp,fp,tn,fn\n");
    for (post_path, label_path) in posteriors.iter().zip(labels) {
        let (post, rate) = read_posterior_csv(post_path)?;
        if post.num_states() != run.config.num_states {
            return Err(Failure::Lib(Error::DimensionMismatch {
                expected: run.config.num_states,
                got: post.num_states(),
            }));
        }
        let truth =
            read_labels_json(label_path)?.expand(post.len(), rate, run.config.num_states, run.config.seizure_state)?;
        run.inputs.push(post_path.clone());
        run.inputs.push(label_path.clone());
        let (detection, m) = evaluate_sequence(&post, &truth, run.config.seizure_index(), rate, &run.config.detection)?;
        let name = stem(post_path);
        table.push_str(&format!(
            "{name},{},{},{},{},{},{},{},{},{}\n",
            cell(m.sensitivity),
            cell(m.specificity),
            cell(Some(m.mcc)),
            cell(m.auc_roc),
            cell(m.auc_pr),
            m.tp,
            m.fp,
            m.tn,
            m.fn_
        ));
        if plot_data {
            let mut plot = String::from("time_s,seizure_prob,predicted,truth\n");
            for (t, (p, d)) in detection.seizure_prob.iter().zip(&detection.predicted).enumerate() {
                let is_seizure = truth.0[t] == run.config.seizure_index();
                plot.push_str(&format!(
                    "{:.6},{p:.17e},{},{}\n",
                    t as f64 / rate,
                    u8::from(*d),
                    u8::from(is_seizure)
                ));
            }
            run.write_text(&format!("{name}.plot.csv"), &plot)?;
        }
    }
    run.write_text("evaluation.csv", &table)?;
    run.finish()
}

fn crossval(common: &Common, dataset: &Dataset) -> Outcome<()> {
    let mut run = Run::new("crossval", common)?;
    let inputs = load_dataset(&mut run, dataset)?;
    let report = run_crossval(&inputs, &run.config)?;
    run.write_text("metrics.csv", &report.metrics_csv())?;
    run.write_text("summary.csv", &report.summary_csv())?;
    run.write_text("best_band.csv", &report.best_band_csv())?;
    let folds = serde_json::to_value(&report.folds).map_err(Error::from)?;
    write_json(&run.output("folds.json"), &folds)?;
    let provenance: Vec<Value> = report
        .folds
        .iter()
        .map(
            |f| json!({ "held_out": f.fold, "held_out_sha256": f.held_out_checksum, "training_data": f.training_data }),
        )
        .collect();
    run.extra.push(("folds", Value::Array(provenance)));
    run.finish()
}

fn configure_threads() -> Outcome<()> {
    if let Ok(v) = std::env::var("HMSMM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("HMSMM_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome<()> {
    configure_threads()?;
    match &cli.command {
        Command::Synth { common } => synth(common),
        Command::Preprocess { common, rms, inputs } => preprocess_cmd(common, *rms, inputs),
        Command::Train { common, band, dataset } => train(common, band.as_deref(), dataset),
        Command::Predict {
            common,
            model,
            mode,
            band,
            inputs,
        } => predict(common, model, *mode, band.as_deref(), inputs),
        Command::Evaluate {
            common,
            plot_data,
            posteriors,
            labels,
        } => evaluate(common, *plot_data, posteriors, labels),
        Command::Crossval { common, dataset } => crossval(common, dataset),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
