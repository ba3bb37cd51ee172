use std::fs;
use std::path::Path;

use hmsmm::baselines::{GaussianEmissionParams, GhmmModel, StaticPrior};
use hmsmm::data::{EegSequence, StateSequence};
use hmsmm::emission::EmissionParams;
use hmsmm::error::Error;
use hmsmm::inference::{posterior, HmsmmModel};
use hmsmm::io::{
    load_hmsmm, load_model, read_labels_json, read_posterior_csv, read_sequence_csv, save_model, write_labels_json,
    write_posterior_csv, write_sequence_csv, DataChecksum, ModelFile, Provenance, StoredModel,
};
use hmsmm::markov::{TransitionMask, TransitionModel};
use hmsmm::synthetic::rng_from_seed;
use rand::Rng;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn reads_small_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "x.csv",
        "# sampling_rate_hz=250\nt,Fp1,Fp2\n0,1.5,-2\n1,0.25,3e-1\n2,7,8\n",
    );
    let s = read_sequence_csv(&p).unwrap();
    assert_eq!((s.len(), s.channels()), (3, 2));
    assert_eq!(s.sampling_rate_hz(), 250.0);
    assert_eq!(s.row(1), &[0.25, 0.3]);
    assert_eq!(s.channel_names().unwrap(), &["Fp1".to_string(), "Fp2".to_string()]);
}

#[test]
fn named_channels_without_time_column_and_sidecar_rate() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "y.csv", "a,b,c\n1,2,3\n4,5,6\n");
    write(dir.path(), "y.meta.json", r#"{"sampling_rate_hz": 128}"#);
    let s = read_sequence_csv(&p).unwrap();
    assert_eq!((s.len(), s.channels(), s.sampling_rate_hz()), (2, 3, 128.0));
}

#[test]
fn missing_rate_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "z.csv", "t,a\n0,1\n");
    let err = read_sequence_csv(&p).unwrap_err();
    assert!(err.to_string().contains("sampling rate"), "{err}");
}

#[test]
fn nan_reports_its_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("# sampling_rate_hz=10\nt,a,b\n");
    for t in 1..=9 {
        let v = if t == 7 { "NaN" } else { "1.0" };
        text.push_str(&format!("{t},0.5,{v}\n"));
    }
    let p = write(dir.path(), "n.csv", &text);
    match read_sequence_csv(&p).unwrap_err() {
        Error::Csv { row, line, .. } => assert_eq!((row, line), (7, 9)),
        e => panic!("unexpected {e}"),
    }
    let err = read_sequence_csv(&p).unwrap_err();
    assert!(err.to_string().contains("row 7"));
    assert!(err.is_validation());
}

#[test]
fn ragged_and_garbage_rows_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "r.csv", "# sampling_rate_hz=10\nt,a,b\n0,1,2\n1,3\n");
    assert!(matches!(read_sequence_csv(&p).unwrap_err(), Error::Csv { row: 2, .. }));
    let p = write(dir.path(), "g.csv", "# sampling_rate_hz=10\nt,a\n0,abc\n");
    assert!(matches!(read_sequence_csv(&p).unwrap_err(), Error::Csv { row: 1, .. }));
}

#[test]
fn sequence_round_trip_is_exact() {
    let mut rng = rng_from_seed(1);
    let v: Vec<f64> = (0..300)
        .map(|_| rng.random_range(-1e3..1e3) * rng.random_range(1e-9..1.0))
        .collect();
    let s = EegSequence::new(v, 3, 500.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    write_sequence_csv(&p, &s).unwrap();
    let back = read_sequence_csv(&p).unwrap();
    for (a, b) in s.as_slice().iter().zip(back.as_slice()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
    assert!(fs::read_to_string(&p)
        .unwrap()
        .starts_with("# sampling_rate_hz=500\nt,ch1,ch2,ch3\n"));
}

#[test]
fn labels_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "l.json",
        r#"{"intervals": [{"state": 2, "start_s": 10.0, "end_s": 20.0}], "post_seizure_fill": true}"#,
    );
    let s = read_labels_json(&p).unwrap().expand(15_000, 500.0, 3, 2).unwrap();
    assert_eq!(s.0[4999], 0);
    assert_eq!(s.0[5000], 1);
    assert_eq!(s.0[9999], 1);
    assert_eq!(s.0[10_000], 2);

    let q = dir.path().join("q.json");
    let labels = StateSequence(vec![0, 0, 1, 2, 2]);
    write_labels_json(&q, &labels).unwrap();
    assert_eq!(read_labels_json(&q).unwrap().expand(5, 1.0, 3, 2).unwrap(), labels);
}

fn random_spd(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let b: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            s[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum::<f64>();
        }
        s[i * d + i] += 0.3;
    }
    s
}

fn random_transition(rng: &mut impl Rng) -> TransitionModel {
    let row = |rng: &mut dyn rand::RngCore| {
        let a: f64 = rng.random_range(0.6..0.99);
        vec![a, 1.0 - a]
    };
    let a = vec![
        {
            let r = row(rng);
            vec![r[0], r[1], 0.0]
        },
        {
            let r = row(rng);
            vec![0.0, r[0], r[1]]
        },
        {
            let r = row(rng);
            vec![r[1], 0.0, r[0]]
        },
    ];
    TransitionModel::new(vec![0.7, 0.2, 0.1], a, TransitionMask::seizure_cycle(3).unwrap()).unwrap()
}

fn random_model(seed: u64) -> HmsmmModel {
    let mut rng = rng_from_seed(seed);
    let emissions = (0..3)
        .map(|_| {
            let mu = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            EmissionParams::new(mu, random_spd(4, &mut rng), rng.random_range(1.0..40.0)).unwrap()
        })
        .collect();
    HmsmmModel::new(random_transition(&mut rng), emissions).unwrap()
}

fn provenance() -> Provenance {
    Provenance {
        config_hash: "abc".into(),
        band: Some("alpha".into()),
        training_data: vec![DataChecksum {
            id: "p1".into(),
            sha256: "00".into(),
        }],
    }
}

#[test]
fn model_round_trip_keeps_parameters_and_posteriors() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng_from_seed(99);
    let probe = EegSequence::new((0..400).map(|_| rng.random_range(-3.0..3.0)).collect(), 4, 100.0).unwrap();
    for seed in 0..5 {
        let model = random_model(seed);
        let p = dir.path().join(format!("m{seed}.json"));
        let file = ModelFile {
            model: StoredModel::Hmsmm(model.clone()),
            provenance: provenance(),
        };
        save_model(&p, &file).unwrap();
        let loaded = load_model(&p).unwrap();
        assert_eq!(loaded, file);
        let back = load_hmsmm(&p).unwrap();
        for (a, b) in model.emissions().iter().zip(back.emissions()) {
            assert_eq!(a.mu(), b.mu());
            assert_eq!(a.sigma(), b.sigma());
            assert_eq!(a.nu(), b.nu());
        }
        let g1 = posterior(&model, &probe).unwrap();
        let g2 = posterior(&back, &probe).unwrap();
        for (x, y) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

fn ghmm_file() -> ModelFile {
    let model = random_model(3);
    let gaussians = model
        .emissions()
        .iter()
        .map(|e| GaussianEmissionParams::new(e.mu().to_vec(), e.sigma().to_vec()).unwrap())
        .collect();
    ModelFile {
        model: StoredModel::Ghmm(GhmmModel::new(model.transition().clone(), gaussians).unwrap()),
        provenance: provenance(),
    }
}

#[test]
fn ghmm_and_static_models_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.json");
    let g = ghmm_file();
    save_model(&p, &g).unwrap();
    assert_eq!(load_model(&p).unwrap(), g);

    let s = ModelFile {
        model: StoredModel::SmmStatic {
            emissions: random_model(4).emissions().to_vec(),
            prior: StaticPrior::new(vec![0.6, 0.1, 0.3]).unwrap(),
        },
        provenance: Provenance::default(),
    };
    let q = dir.path().join("s.json");
    save_model(&q, &s).unwrap();
    assert_eq!(load_model(&q).unwrap(), s);
}

#[test]
fn loading_the_wrong_kind_fails() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.json");
    save_model(&p, &ghmm_file()).unwrap();
    let err = load_hmsmm(&p).unwrap_err();
    assert!(matches!(err, Error::ModelKindMismatch { .. }));
    assert!(err.to_string().contains("model kind mismatch"), "{err}");
}

#[test]
fn damaged_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    save_model(
        &p,
        &ModelFile {
            model: StoredModel::Hmsmm(random_model(7)),
            provenance: provenance(),
        },
    )
    .unwrap();
    let text = fs::read_to_string(&p).unwrap();

    let truncated = write(dir.path(), "t.json", &text[..text.len() / 2]);
    assert!(load_model(&truncated).unwrap_err().to_string().contains("parse error"));

    let tampered = write(dir.path(), "x.json", &text.replacen("\"nu\": ", "\"nu\": 1", 1));
    assert!(load_model(&tampered)
        .unwrap_err()
        .to_string()
        .contains("checksum mismatch"));

    let version = write(
        dir.path(),
        "v.json",
        &text.replacen("\"format\": 1", "\"format\": 2", 1),
    );
    assert!(load_model(&version)
        .unwrap_err()
        .to_string()
        .contains("unsupported model format 2"));
}

#[test]
fn posterior_csv_round_trip() {
    let model = random_model(11);
    let mut rng = rng_from_seed(12);
    let x = EegSequence::new((0..200).map(|_| rng.random_range(-3.0..3.0)).collect(), 4, 50.0).unwrap();
    let g = posterior(&model, &x).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.csv");
    write_posterior_csv(&p, &g, 50.0).unwrap();
    let (back, rate) = read_posterior_csv(&p).unwrap();
    assert_eq!(rate, 50.0);
    assert_eq!(back.as_slice(), g.as_slice());
}
