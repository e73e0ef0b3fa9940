//! Synthetic pure-rhythm EEG fixtures: five stage-like waveform recipes
//! written out as annotated EDF+ recordings. These drive the end-to-end
//! checks and the bundled demo dataset; they are caricatures of stage
//! physiology, not simulations of it.

use crate::edf::{
    encode_annotation_signal, EdfFile, EdfHeader, HypnogramAnnotation, SignalSpec, StartDateTime,
    ANNOTATION_LABEL, EPOCH_SECONDS,
};
use crate::stage::Stage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub epochs_per_class: usize,
    pub sampling_rate_hz: f64,
    pub epochs_per_recording: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            epochs_per_class: 10,
            sampling_rate_hz: 100.0,
            epochs_per_recording: 25,
            seed: 0,
        }
    }
}

fn sawtooth(phase: f64) -> f64 {
    2.0 * (phase - (phase + 0.5).floor())
}

/// One 30-second epoch of the stage-like rhythm, in microvolts.
///
/// Wake: 10 Hz alpha. N1: mixed 5 + 15 Hz low-amplitude activity.
/// N2: low background with 13 Hz spindle-like bursts. N3: high-amplitude
/// 1 Hz slow waves. REM: sawtooth sweeping 2-6 Hz.
pub fn class_epoch_samples(
    stage: Stage,
    sampling_rate_hz: f64,
    phase: f64,
    noise_rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = (EPOCH_SECONDS * sampling_rate_hz).round() as usize;
    let dt = 1.0 / sampling_rate_hz;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        let signal = match stage {
            Stage::Wake => 30.0 * (2.0 * PI * 10.0 * t + phase).sin(),
            Stage::N1 => {
                18.0 * (2.0 * PI * 5.0 * t + phase).sin()
                    + 18.0 * (2.0 * PI * 15.0 * t + 1.7 * phase).sin()
            }
            Stage::N2 => {
                let background = 12.0 * (2.0 * PI * 4.0 * t + phase).sin();
                let in_burst = (t + phase / (2.0 * PI)).rem_euclid(5.0) < 1.2;
                let spindle = if in_burst {
                    45.0 * (2.0 * PI * 13.0 * t + phase).sin()
                } else {
                    0.0
                };
                background + spindle
            }
            Stage::N3 => 120.0 * (2.0 * PI * 1.0 * t + phase).sin(),
            Stage::Rem => {
                // Sawtooth whose frequency steps through 2..6 Hz each second.
                let freq = 2.0 + (t.floor() as u64 % 5) as f64;
                45.0 * sawtooth(freq * t + phase / (2.0 * PI))
            }
        };
        out.push(signal + noise_rng.random_range(-3.0..3.0));
    }
    out
}

/// Deterministic stage sequence: classes rotate so every recording mixes
/// all five.
pub fn stage_plan(config: &SynthConfig) -> Vec<Stage> {
    let total = config.epochs_per_class * Stage::ALL.len();
    (0..total).map(|i| Stage::ALL[i % Stage::ALL.len()]).collect()
}

/// Build annotated EDF+ recordings for the synthetic dataset.
pub fn synthesize_recordings(config: &SynthConfig) -> Vec<(String, EdfFile)> {
    let plan = stage_plan(config);
    let fs = config.sampling_rate_hz;
    let epoch_len = (EPOCH_SECONDS * fs).round() as usize;

    let mut recordings = Vec::new();
    for (rec_idx, chunk) in plan.chunks(config.epochs_per_recording.max(1)).enumerate() {
        let source_id = format!("synth{rec_idx:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (rec_idx as u64).wrapping_mul(0x5337));
        let mut samples = Vec::with_capacity(chunk.len() * epoch_len);
        let mut annotations = Vec::with_capacity(chunk.len());
        for (k, &stage) in chunk.iter().enumerate() {
            let phase = rng.random_range(0.0..(2.0 * PI));
            samples.extend(class_epoch_samples(stage, fs, phase, &mut rng));
            annotations.push(HypnogramAnnotation {
                onset_s: k as f64 * EPOCH_SECONDS,
                duration_s: EPOCH_SECONDS,
                stage_text: match stage {
                    Stage::Wake => "Sleep stage W",
                    Stage::N1 => "Sleep stage 1",
                    Stage::N2 => "Sleep stage 2",
                    Stage::N3 => "Sleep stage 3",
                    Stage::Rem => "Sleep stage R",
                }
                .to_string(),
            });
        }

        let eeg_spec = SignalSpec {
            label: "EEG Fpz-Cz".into(),
            transducer: "synthetic".into(),
            physical_dimension: "uV".into(),
            physical_min: -200.0,
            physical_max: 200.0,
            digital_min: -2048,
            digital_max: 2047,
            prefiltering: String::new(),
            samples_per_record: epoch_len,
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
        let digital_eeg: Vec<i16> = samples.iter().map(|&v| eeg_spec.to_digital(v)).collect();
        let record_starts: Vec<f64> =
            (0..chunk.len()).map(|k| k as f64 * EPOCH_SECONDS).collect();
        let digital_ann = encode_annotation_signal(&record_starts, &annotations, 40)
            .expect("fixture annotations fit");

        let header = EdfHeader {
            version_tag: "0".into(),
            patient_id: format!("X X X {source_id}"),
            recording_id: format!("Startdate 01-JAN-2000 {source_id}"),
            start_datetime: StartDateTime::default(),
            header_bytes: 256 + 256 * 2,
            reserved: "EDF+C".into(),
            record_count: chunk.len(),
            record_duration_s: EPOCH_SECONDS,
            signal_count: 2,
        };
        recordings.push((
            source_id,
            EdfFile { header, signals: vec![eeg_spec, ann_spec], digital: vec![digital_eeg, digital_ann] },
        ));
    }
    recordings
}

/// Write the synthetic dataset as .edf files; returns the paths.
pub fn write_synthetic_dataset(dir: &Path, config: &SynthConfig) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (source_id, file) in synthesize_recordings(config) {
        let path = dir.join(format!("{source_id}.edf"));
        let bytes = file.to_bytes();
        let unchanged = std::fs::read(&path).map(|old| old == bytes).unwrap_or(false);
        if !unchanged {
            std::fs::write(&path, bytes)?;
        }
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edf::{map_stage_labels, parse_edf, select_channel};
    use crate::stage::EpochLabel;

    #[test]
    fn recordings_parse_back_with_matching_hypnograms() {
        let config = SynthConfig { epochs_per_class: 2, ..Default::default() };
        let recordings = synthesize_recordings(&config);
        assert_eq!(recordings.len(), 1); // 10 epochs fit one recording
        let (_, file) = &recordings[0];
        let parsed = parse_edf(&file.to_bytes()).unwrap();
        let channel = select_channel(&parsed, "EEG Fpz-Cz").unwrap();
        assert_eq!(channel.sampling_rate_hz, 100.0);
        assert_eq!(channel.samples.len(), 10 * 3000);
        let labels = map_stage_labels(&parsed.annotations).unwrap();
        assert_eq!(labels.len(), 10);
        assert_eq!(labels[0], EpochLabel::Stage(Stage::Wake));
        assert_eq!(labels[3], EpochLabel::Stage(Stage::N3));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let config = SynthConfig { epochs_per_class: 1, ..Default::default() };
        let a = synthesize_recordings(&config);
        let b = synthesize_recordings(&config);
        assert_eq!(a[0].1.to_bytes(), b[0].1.to_bytes());
    }

    #[test]
    fn class_amplitudes_are_ordered_as_designed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut peak = |stage: Stage| {
            class_epoch_samples(stage, 100.0, 0.3, &mut rng)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
        };
        let n3 = peak(Stage::N3);
        let wake = peak(Stage::Wake);
        assert!(n3 > 100.0, "slow waves must be high amplitude, got {n3}");
        assert!(wake < 40.0, "alpha stays moderate, got {wake}");
    }
}
