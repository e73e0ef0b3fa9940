//! EDF/EDF+ ingestion: fixed-header parsing, per-signal calibration,
//! time-stamped annotation (TAL) decoding, scoring-channel selection and
//! hypnogram-to-epoch label mapping.
//!
//! Layout handled here: 256-byte fixed header, 256 bytes of header per
//! signal, then data records of 16-bit little-endian two's-complement
//! samples. Annotation signals carry TALs delimited by the
//! 0x14/0x15/0x00 convention.

mod parse;
mod write;

pub use parse::parse_edf_file;
pub use write::encode_annotation_signal;

use crate::stage::{EpochLabel, Stage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Epoch length every hypnogram in this pipeline is scored on.
pub const EPOCH_SECONDS: f64 = 30.0;

/// Signal label that marks an EDF+ annotation signal.
pub const ANNOTATION_LABEL: &str = "EDF Annotations";

#[derive(Debug, Error)]
pub enum EdfError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("inconsistent signal spec: {0}")]
    InconsistentSpec(String),
    #[error("truncated data region: expected {expected} bytes, found {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("malformed annotation record: {0}")]
    MalformedAnnotation(String),
    #[error("channel not found: {0:?}")]
    ChannelNotFound(String),
    #[error("channel label {0:?} matches more than one channel")]
    AmbiguousChannel(String),
    #[error("unknown stage text: {0:?}")]
    UnknownStageText(String),
    #[error("annotations are not a contiguous span from onset 0: {0}")]
    NonContiguousAnnotations(String),
    #[error("stage annotation duration {0} s is not a multiple of 30 s")]
    InvalidAnnotationDuration(f64),
}

/// Recording start timestamp as stored in the EDF header (dd.mm.yy pivot:
/// 85..=99 map to 19xx, 00..=84 to 20xx).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartDateTime {
    pub year: u16,
    pub month: u8,
    pub day: u8,
    pub hour: u8,
    pub minute: u8,
    pub second: u8,
}

impl Default for StartDateTime {
    fn default() -> Self {
        StartDateTime { year: 2000, month: 1, day: 1, hour: 0, minute: 0, second: 0 }
    }
}

/// Parsed fixed header of an EDF/EDF+ file.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub version_tag: String,
    pub patient_id: String,
    pub recording_id: String,
    pub start_datetime: StartDateTime,
    pub header_bytes: usize,
    pub reserved: String,
    pub record_count: usize,
    pub record_duration_s: f64,
    pub signal_count: usize,
}

/// Per-signal header block: labels, calibration range and sampling layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
}

impl SignalSpec {
    pub fn is_annotation(&self) -> bool {
        self.label.trim() == ANNOTATION_LABEL
    }

    /// Digital-to-physical calibration. Affine, with the digital endpoints
    /// mapping exactly onto the physical endpoints; the two-product form
    /// keeps the endpoints exact under rounding.
    pub fn to_physical(&self, digital: i16) -> f64 {
        let t = (digital as f64 - self.digital_min as f64)
            / (self.digital_max as f64 - self.digital_min as f64);
        self.physical_min * (1.0 - t) + self.physical_max * t
    }

    /// Inverse of [`SignalSpec::to_physical`], rounded to the nearest code.
    pub fn to_digital(&self, physical: f64) -> i16 {
        let scaled = (physical - self.physical_min)
            / (self.physical_max - self.physical_min)
            * (self.digital_max as f64 - self.digital_min as f64)
            + self.digital_min as f64;
        scaled.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
    }

    fn validate(&self, index: usize) -> Result<(), EdfError> {
        if self.digital_min >= self.digital_max {
            return Err(EdfError::InconsistentSpec(format!(
                "signal {index}: digital_min {} >= digital_max {}",
                self.digital_min, self.digital_max
            )));
        }
        if self.physical_min == self.physical_max {
            return Err(EdfError::InconsistentSpec(format!(
                "signal {index}: physical_min == physical_max == {}",
                self.physical_min
            )));
        }
        if self.samples_per_record < 1 {
            return Err(EdfError::InconsistentSpec(format!(
                "signal {index}: samples_per_record must be >= 1"
            )));
        }
        let (lo, hi) = (i16::MIN as i32, i16::MAX as i32);
        if self.digital_min < lo || self.digital_max > hi {
            return Err(EdfError::InconsistentSpec(format!(
                "signal {index}: digital range [{}, {}] exceeds 16-bit",
                self.digital_min, self.digital_max
            )));
        }
        Ok(())
    }
}

/// A fully parsed EDF file: header, signal specs, and the raw digital
/// samples of every signal (record-concatenated). Annotation-signal bytes
/// are kept verbatim as i16 pairs so serialization is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfFile {
    pub header: EdfHeader,
    pub signals: Vec<SignalSpec>,
    /// One sample vector per signal, `record_count * samples_per_record` long.
    pub digital: Vec<Vec<i16>>,
}

impl EdfFile {
    pub fn parse(bytes: &[u8]) -> Result<EdfFile, EdfError> {
        parse::parse_edf_file(bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        write::edf_to_bytes(self)
    }

    /// Calibrate data signals and decode annotation signals into a [`Recording`].
    pub fn to_recording(&self) -> Result<Recording, EdfError> {
        let mut channels = Vec::new();
        let mut annotations = Vec::new();
        for (spec, samples) in self.signals.iter().zip(&self.digital) {
            if spec.is_annotation() {
                annotations.extend(parse::decode_annotation_signal(
                    samples,
                    spec.samples_per_record,
                    self.header.record_count,
                )?);
            } else {
                channels.push(Channel {
                    label: spec.label.clone(),
                    sampling_rate_hz: spec.samples_per_record as f64
                        / self.header.record_duration_s,
                    samples: samples.iter().map(|&d| spec.to_physical(d)).collect(),
                });
            }
        }
        Ok(Recording {
            start_datetime: self.header.start_datetime,
            channels,
            annotations,
        })
    }
}

/// One calibrated channel in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub label: String,
    pub sampling_rate_hz: f64,
    pub samples: Vec<f64>,
}

/// One decoded EDF+ annotation: onset/duration in seconds plus raw text
/// (e.g. "Sleep stage W").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypnogramAnnotation {
    pub onset_s: f64,
    pub duration_s: f64,
    pub stage_text: String,
}

/// A calibrated multi-channel recording with its hypnogram annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub start_datetime: StartDateTime,
    pub channels: Vec<Channel>,
    pub annotations: Vec<HypnogramAnnotation>,
}

/// Parse raw EDF/EDF+ bytes into a calibrated [`Recording`].
pub fn parse_edf(bytes: &[u8]) -> Result<Recording, EdfError> {
    EdfFile::parse(bytes)?.to_recording()
}

fn normalize_label(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Select the scoring channel by label. Matching is case-insensitive with
/// whitespace normalization; zero or multiple matches err loudly.
pub fn select_channel<'a>(recording: &'a Recording, label: &str) -> Result<&'a Channel, EdfError> {
    let wanted = normalize_label(label);
    let mut found: Option<&Channel> = None;
    for ch in &recording.channels {
        if normalize_label(&ch.label) == wanted {
            if found.is_some() {
                return Err(EdfError::AmbiguousChannel(label.to_string()));
            }
            found = Some(ch);
        }
    }
    found.ok_or_else(|| EdfError::ChannelNotFound(label.to_string()))
}

/// Raw hypnogram vocabulary accepted by [`map_stage_labels`]. R&K stages 3
/// and 4 both fold into N3; movement and unscored time are excluded.
fn map_stage_text(text: &str) -> Result<EpochLabel, EdfError> {
    match text.trim() {
        "Sleep stage W" => Ok(EpochLabel::Stage(Stage::Wake)),
        "Sleep stage 1" => Ok(EpochLabel::Stage(Stage::N1)),
        "Sleep stage 2" => Ok(EpochLabel::Stage(Stage::N2)),
        "Sleep stage 3" => Ok(EpochLabel::Stage(Stage::N3)),
        "Sleep stage 4" => Ok(EpochLabel::Stage(Stage::N3)),
        "Sleep stage R" => Ok(EpochLabel::Stage(Stage::Rem)),
        "Sleep stage ?" | "Movement time" => Ok(EpochLabel::Excluded),
        other => Err(EdfError::UnknownStageText(other.to_string())),
    }
}

/// Expand hypnogram annotations into one label per 30-second epoch.
///
/// The annotations must cover a contiguous span starting at onset 0, and
/// every duration must be an integer multiple of 30 s.
pub fn map_stage_labels(annotations: &[HypnogramAnnotation]) -> Result<Vec<EpochLabel>, EdfError> {
    let mut sorted: Vec<&HypnogramAnnotation> = annotations.iter().collect();
    sorted.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));

    const EPS: f64 = 1e-6;
    let mut labels = Vec::new();
    let mut cursor = 0.0_f64;
    for ann in sorted {
        if (ann.onset_s - cursor).abs() > EPS {
            return Err(EdfError::NonContiguousAnnotations(format!(
                "expected onset {} s, found {} s ({:?})",
                cursor, ann.onset_s, ann.stage_text
            )));
        }
        let epochs = ann.duration_s / EPOCH_SECONDS;
        if (epochs - epochs.round()).abs() > EPS {
            return Err(EdfError::InvalidAnnotationDuration(ann.duration_s));
        }
        let label = map_stage_text(&ann.stage_text)?;
        let n = epochs.round() as usize;
        labels.extend(std::iter::repeat(label).take(n));
        cursor = ann.onset_s + ann.duration_s;
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(text: &str, onset: f64, duration: f64) -> HypnogramAnnotation {
        HypnogramAnnotation { onset_s: onset, duration_s: duration, stage_text: text.into() }
    }

    fn two_channel_recording() -> Recording {
        Recording {
            start_datetime: StartDateTime::default(),
            channels: vec![
                Channel { label: "EEG Fpz-Cz".into(), sampling_rate_hz: 100.0, samples: vec![1.0] },
                Channel { label: "EEG Pz-Oz".into(), sampling_rate_hz: 100.0, samples: vec![2.0] },
            ],
            annotations: vec![],
        }
    }

    #[test]
    fn select_exact_match() {
        let rec = two_channel_recording();
        let ch = select_channel(&rec, "EEG Fpz-Cz").unwrap();
        assert_eq!(ch.samples, vec![1.0]);
    }

    #[test]
    fn select_is_case_and_whitespace_insensitive() {
        let rec = two_channel_recording();
        let ch = select_channel(&rec, "eeg fpz-cz").unwrap();
        assert_eq!(ch.label, "EEG Fpz-Cz");
        let ch = select_channel(&rec, "  EEG   Fpz-Cz ").unwrap();
        assert_eq!(ch.label, "EEG Fpz-Cz");
    }

    #[test]
    fn select_missing_label_errs() {
        let rec = two_channel_recording();
        assert!(matches!(select_channel(&rec, "EMG"), Err(EdfError::ChannelNotFound(_))));
    }

    #[test]
    fn select_duplicate_label_errs() {
        let mut rec = two_channel_recording();
        rec.channels[1].label = "EEG  FPZ-CZ".into();
        assert!(matches!(
            select_channel(&rec, "EEG Fpz-Cz"),
            Err(EdfError::AmbiguousChannel(_))
        ));
    }

    #[test]
    fn stage_annotation_expands_per_30s() {
        let labels = map_stage_labels(&[ann("Sleep stage W", 0.0, 90.0)]).unwrap();
        assert_eq!(labels, vec![EpochLabel::Stage(Stage::Wake); 3]);
    }

    #[test]
    fn rk_stage_four_merges_into_n3() {
        let labels = map_stage_labels(&[ann("Sleep stage 4", 0.0, 30.0)]).unwrap();
        assert_eq!(labels, vec![EpochLabel::Stage(Stage::N3)]);
    }

    #[test]
    fn movement_maps_to_excluded() {
        let labels = map_stage_labels(&[ann("Movement time", 0.0, 60.0)]).unwrap();
        assert_eq!(labels, vec![EpochLabel::Excluded; 2]);
    }

    #[test]
    fn unknown_stage_text_errs() {
        assert!(matches!(
            map_stage_labels(&[ann("Sleep stage X", 0.0, 30.0)]),
            Err(EdfError::UnknownStageText(_))
        ));
    }

    #[test]
    fn gap_in_annotations_errs() {
        let anns = [ann("Sleep stage W", 0.0, 30.0), ann("Sleep stage 1", 90.0, 30.0)];
        assert!(matches!(
            map_stage_labels(&anns),
            Err(EdfError::NonContiguousAnnotations(_))
        ));
    }

    #[test]
    fn non_multiple_duration_errs() {
        assert!(matches!(
            map_stage_labels(&[ann("Sleep stage W", 0.0, 45.0)]),
            Err(EdfError::InvalidAnnotationDuration(_))
        ));
    }

    #[test]
    fn label_count_matches_duration_sum() {
        let anns = [
            ann("Sleep stage W", 0.0, 120.0),
            ann("Sleep stage 1", 120.0, 60.0),
            ann("Sleep stage R", 180.0, 300.0),
        ];
        let labels = map_stage_labels(&anns).unwrap();
        assert_eq!(labels.len(), (120 + 60 + 300) / 30);
    }

    #[test]
    fn calibration_hits_endpoints() {
        let spec = SignalSpec {
            label: "EEG".into(),
            transducer: String::new(),
            physical_dimension: "uV".into(),
            physical_min: -200.0,
            physical_max: 200.0,
            digital_min: -2048,
            digital_max: 2047,
            prefiltering: String::new(),
            samples_per_record: 100,
        };
        assert_eq!(spec.to_physical(-2048), -200.0);
        assert_eq!(spec.to_physical(2047), 200.0);
        // Direct evaluation: (0 + 2048) * 400 / 4095 - 200 = 0.04884...
        let mid = spec.to_physical(0);
        assert!((mid - 0.0488400488).abs() < 1e-6, "mid = {mid}");
    }
}
