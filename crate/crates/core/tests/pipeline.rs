//! Command-level behavior of the pipeline orchestration: manifest
//! contents, skip-bad handling, idempotent re-runs, and missing-upstream
//! diagnostics.

use somnia_core::config::RunConfig;
use somnia_core::edf::{
    encode_annotation_signal, EdfFile, EdfHeader, HypnogramAnnotation, SignalSpec, StartDateTime,
    ANNOTATION_LABEL, EPOCH_SECONDS,
};
use somnia_core::pipeline::{self, PipelineError};
use somnia_core::synth::{write_synthetic_dataset, SynthConfig};
use std::path::Path;

#[allow(clippy::field_reassign_with_default)]
fn small_run_config(dir: &Path) -> RunConfig {
    let mut config = RunConfig::default();
    config.out_dir = dir.join("out");
    config.render.width_px = 64;
    config.render.height_px = 64;
    config.vision.input_size = (3, 64, 64);
    config.vision.width_scale = 0.125;
    config.encoder.patch_px = 16;
    config.lm.embedding_dim = 32;
    config.test_per_class = 1;
    config.cot.per_class_quota = 2;
    config.cot.allow_short = true;
    config.vision_train.epochs = 1;
    config.joint.epochs = 1;
    config
}

/// EDF with an annotation track made only of excluded epochs.
fn excluded_only_edf() -> EdfFile {
    let fs = 100.0;
    let epochs = 3usize;
    let samples_per_record = (EPOCH_SECONDS * fs) as usize;
    let eeg = SignalSpec {
        label: "EEG Fpz-Cz".into(),
        transducer: String::new(),
        physical_dimension: "uV".into(),
        physical_min: -200.0,
        physical_max: 200.0,
        digital_min: -2048,
        digital_max: 2047,
        prefiltering: String::new(),
        samples_per_record,
    };
    let ann_spec = SignalSpec {
        label: ANNOTATION_LABEL.into(),
        transducer: String::new(),
        physical_dimension: String::new(),
        physical_min: -1.0,
        physical_max: 1.0,
        digital_min: -32768,
        digital_max: 32767,
        prefiltering: String::new(),
        samples_per_record: 40,
    };
    let annotations: Vec<HypnogramAnnotation> = (0..epochs)
        .map(|k| HypnogramAnnotation {
            onset_s: k as f64 * EPOCH_SECONDS,
            duration_s: EPOCH_SECONDS,
            stage_text: if k % 2 == 0 { "Movement time" } else { "Sleep stage ?" }.into(),
        })
        .collect();
    let starts: Vec<f64> = (0..epochs).map(|k| k as f64 * EPOCH_SECONDS).collect();
    let digital_ann = encode_annotation_signal(&starts, &annotations, 40).unwrap();
    let digital_eeg: Vec<i16> =
        (0..epochs * samples_per_record).map(|i| ((i % 100) as i16) - 50).collect();
    EdfFile {
        header: EdfHeader {
            version_tag: "0".into(),
            patient_id: "X".into(),
            recording_id: "X".into(),
            start_datetime: StartDateTime::default(),
            header_bytes: 256 + 512,
            reserved: "EDF+C".into(),
            record_count: epochs,
            record_duration_s: EPOCH_SECONDS,
            signal_count: 2,
        },
        signals: vec![eeg, ann_spec],
        digital: vec![digital_eeg, digital_ann],
    }
}

#[test]
fn preprocess_writes_one_manifest_line_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_run_config(dir.path());
    let synth = SynthConfig { epochs_per_class: 2, seed: 3, ..Default::default() };
    config.dataset.edf_paths = write_synthetic_dataset(&dir.path().join("edf"), &synth).unwrap();

    let summary = pipeline::run_preprocess(&config, false).unwrap();
    assert_eq!(summary.epochs, 10);
    let manifest = std::fs::read_to_string(config.out_dir.join("epochs/manifest.tsv")).unwrap();
    let lines: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 10);
}

#[test]
fn preprocess_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_run_config(dir.path());
    let synth = SynthConfig { epochs_per_class: 1, seed: 5, ..Default::default() };
    config.dataset.edf_paths = write_synthetic_dataset(&dir.path().join("edf"), &synth).unwrap();

    pipeline::run_preprocess(&config, false).unwrap();
    let manifest_path = config.out_dir.join("epochs/manifest.tsv");
    let first = std::fs::read(&manifest_path).unwrap();
    let mtime = std::fs::metadata(&manifest_path).unwrap().modified().unwrap();
    pipeline::run_preprocess(&config, false).unwrap();
    assert_eq!(std::fs::read(&manifest_path).unwrap(), first);
    assert_eq!(std::fs::metadata(&manifest_path).unwrap().modified().unwrap(), mtime);
}

#[test]
fn excluded_only_recording_yields_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_run_config(dir.path());
    let edf_path = dir.path().join("excluded.edf");
    std::fs::write(&edf_path, excluded_only_edf().to_bytes()).unwrap();
    config.dataset.edf_paths = vec![edf_path];

    let summary = pipeline::run_preprocess(&config, false).unwrap();
    assert_eq!(summary.epochs, 0);
    assert_eq!(summary.recordings, 1);
    let manifest = std::fs::read_to_string(config.out_dir.join("epochs/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 0);
}

#[test]
fn corrupted_recording_is_skipped_with_skip_bad() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_run_config(dir.path());
    let synth = SynthConfig { epochs_per_class: 1, seed: 7, ..Default::default() };
    let mut paths = write_synthetic_dataset(&dir.path().join("edf"), &synth).unwrap();
    let bad = dir.path().join("edf/corrupt.edf");
    std::fs::write(&bad, b"not an edf header at all").unwrap();
    paths.push(bad.clone());
    config.dataset.edf_paths = paths;

    // Fail-fast without the flag.
    assert!(pipeline::run_preprocess(&config, false).is_err());

    let summary = pipeline::run_preprocess(&config, true).unwrap();
    assert_eq!(summary.recordings, 1);
    assert_eq!(summary.skipped.len(), 1);
    assert_eq!(summary.skipped[0].0, bad);
}

#[test]
fn rerendering_unchanged_inputs_rewrites_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_run_config(dir.path());
    let synth = SynthConfig { epochs_per_class: 1, seed: 9, ..Default::default() };
    config.dataset.edf_paths = write_synthetic_dataset(&dir.path().join("edf"), &synth).unwrap();

    pipeline::run_preprocess(&config, false).unwrap();
    let first = pipeline::run_render(&config).unwrap();
    assert_eq!(first.rendered, 5);
    assert_eq!(first.unchanged, 0);
    let second = pipeline::run_render(&config).unwrap();
    assert_eq!(second.rendered, 0);
    assert_eq!(second.unchanged, 5);
}

#[test]
fn evaluate_without_checkpoints_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_run_config(dir.path());
    let synth = SynthConfig { epochs_per_class: 2, seed: 11, ..Default::default() };
    config.dataset.edf_paths = write_synthetic_dataset(&dir.path().join("edf"), &synth).unwrap();
    pipeline::run_preprocess(&config, false).unwrap();
    pipeline::run_render(&config).unwrap();

    match pipeline::run_evaluate(&config) {
        Err(PipelineError::MissingUpstream { artifact, hint }) => {
            assert!(artifact.ends_with("vision.ckpt"), "artifact was {artifact:?}");
            assert!(hint.contains("train-vision"));
        }
        other => panic!("expected MissingUpstream, got {other:?}"),
    }
}

/// The whole chain over the bundled 50-epoch fixture stays well inside
/// the five-minute budget on a laptop CPU.
#[test]
fn full_pipeline_on_the_bundled_fixture_finishes_quickly() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_run_config(dir.path());
    config.test_per_class = 2;
    config.cot.per_class_quota = 10;
    config.vision_train.epochs = 10;
    config.joint.epochs = 30;
    config.joint.learning_rate = 3e-3;
    let synth = SynthConfig { epochs_per_class: 10, seed: 13, ..Default::default() };
    config.dataset.edf_paths = write_synthetic_dataset(&dir.path().join("edf"), &synth).unwrap();

    pipeline::run_preprocess(&config, false).unwrap();
    pipeline::run_render(&config).unwrap();
    pipeline::run_train_vision(&config).unwrap();
    pipeline::run_gen_cot(&config).unwrap();
    pipeline::run_train_joint(&config).unwrap();
    let evaluation = pipeline::run_evaluate(&config).unwrap();
    pipeline::run_report(&config).unwrap();

    assert_eq!(evaluation.confusion.total(), 10);
    let eval_dir = config.out_dir.join("eval/patch-aligned");
    for artifact in ["metrics.txt", "cm.json", "report.txt", "scores.svg", "confusion.svg"] {
        assert!(eval_dir.join(artifact).exists(), "missing {artifact}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}");
}

#[test]
fn render_before_preprocess_names_the_missing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_run_config(dir.path());
    match pipeline::run_render(&config) {
        Err(PipelineError::MissingUpstream { artifact, hint }) => {
            assert!(artifact.ends_with("manifest.tsv"));
            assert!(hint.contains("preprocess"));
        }
        other => panic!("expected MissingUpstream, got {other:?}"),
    }
}
