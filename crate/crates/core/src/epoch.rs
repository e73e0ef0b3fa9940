//! 30-second epoch segmentation and the on-disk epoch store.
//!
//! Store layout: one directory per recording holding one raw little-endian
//! f32 file per epoch, plus a tab-separated manifest with one line per
//! epoch (source id, epoch index, stage). The manifest's single `#` header
//! line records the store's sampling rate.

use crate::edf::EPOCH_SECONDS;
use crate::stage::{EpochLabel, Stage};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EpochStoreError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EpochStoreError + '_ {
    move |source| EpochStoreError::Io { path: path.to_path_buf(), source }
}

/// One labeled 30-second single-channel EEG segment.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEpoch {
    pub samples: Vec<f64>,
    pub sampling_rate_hz: f64,
    pub stage: Stage,
    pub source_id: String,
    pub epoch_index: usize,
}

impl LabeledEpoch {
    pub fn expected_len(sampling_rate_hz: f64) -> usize {
        (EPOCH_SECONDS * sampling_rate_hz).round() as usize
    }
}

/// Cut a signal into consecutive non-overlapping 30-second epochs, pairing
/// windows with labels positionally. The incomplete tail window and every
/// `Excluded` label are dropped; pairing stops at the shorter of the two.
pub fn segment_epochs(
    signal: &[f64],
    sampling_rate_hz: f64,
    labels: &[EpochLabel],
    source_id: &str,
) -> Vec<LabeledEpoch> {
    let window = LabeledEpoch::expected_len(sampling_rate_hz);
    if window == 0 {
        return Vec::new();
    }
    let full_windows = signal.len() / window;
    (0..full_windows.min(labels.len()))
        .filter_map(|k| {
            labels[k].stage().map(|stage| LabeledEpoch {
                samples: signal[k * window..(k + 1) * window].to_vec(),
                sampling_rate_hz,
                stage,
                source_id: source_id.to_string(),
                epoch_index: k,
            })
        })
        .collect()
}

/// Relative path of one epoch's sample file inside a store.
pub fn epoch_file_name(source_id: &str, epoch_index: usize) -> PathBuf {
    PathBuf::from(source_id).join(format!("{epoch_index:05}.f32le"))
}

pub fn write_epoch_samples(path: &Path, samples: &[f64]) -> Result<(), EpochStoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut bytes = Vec::with_capacity(samples.len() * 4);
    for &s in samples {
        bytes.extend_from_slice(&(s as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_epoch_samples(path: &Path) -> Result<Vec<f64>, EpochStoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(EpochStoreError::MalformedManifest {
            line: 0,
            reason: format!("{} is not a whole number of f32 samples", path.display()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

/// Append epochs from one recording into a store directory, returning the
/// manifest lines written (without trailing newline).
pub fn write_epochs(dir: &Path, epochs: &[LabeledEpoch]) -> Result<Vec<String>, EpochStoreError> {
    let mut lines = Vec::with_capacity(epochs.len());
    for epoch in epochs {
        let rel = epoch_file_name(&epoch.source_id, epoch.epoch_index);
        write_epoch_samples(&dir.join(&rel), &epoch.samples)?;
        lines.push(format!("{}\t{}\t{}", epoch.source_id, epoch.epoch_index, epoch.stage));
    }
    Ok(lines)
}

pub fn write_manifest(
    dir: &Path,
    sampling_rate_hz: f64,
    lines: &[String],
) -> Result<(), EpochStoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("manifest.tsv");
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    writeln!(f, "# somnia epoch store\tfs={sampling_rate_hz}").map_err(io_err(&path))?;
    for line in lines {
        writeln!(f, "{line}").map_err(io_err(&path))?;
    }
    Ok(())
}

/// One manifest row: where an epoch's samples live and how it is labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub source_id: String,
    pub epoch_index: usize,
    pub stage: Stage,
    /// Present once the render step has extended the manifest.
    pub image_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub sampling_rate_hz: f64,
    pub entries: Vec<ManifestEntry>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, EpochStoreError> {
    let path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut sampling_rate_hz = None;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            for field in rest.split('\t') {
                if let Some(fs_text) = field.trim().strip_prefix("fs=") {
                    sampling_rate_hz =
                        Some(fs_text.parse::<f64>().map_err(|_| {
                            EpochStoreError::MalformedManifest {
                                line: i + 1,
                                reason: format!("bad sampling rate {fs_text:?}"),
                            }
                        })?);
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(EpochStoreError::MalformedManifest {
                line: i + 1,
                reason: "expected at least source_id, epoch_index, stage".into(),
            });
        }
        let epoch_index = fields[1].parse::<usize>().map_err(|_| {
            EpochStoreError::MalformedManifest {
                line: i + 1,
                reason: format!("bad epoch index {:?}", fields[1]),
            }
        })?;
        let stage = Stage::parse(fields[2]).ok_or_else(|| EpochStoreError::MalformedManifest {
            line: i + 1,
            reason: format!("unknown stage {:?}", fields[2]),
        })?;
        entries.push(ManifestEntry {
            source_id: fields[0].to_string(),
            epoch_index,
            stage,
            image_path: fields.get(3).map(PathBuf::from),
        });
    }
    let sampling_rate_hz =
        sampling_rate_hz.ok_or_else(|| EpochStoreError::MalformedManifest {
            line: 0,
            reason: "missing fs= header".into(),
        })?;
    Ok(Manifest { sampling_rate_hz, entries })
}

/// Load one epoch's samples back from a store.
pub fn load_epoch(
    dir: &Path,
    entry: &ManifestEntry,
    sampling_rate_hz: f64,
) -> Result<LabeledEpoch, EpochStoreError> {
    let samples = read_epoch_samples(&dir.join(epoch_file_name(&entry.source_id, entry.epoch_index)))?;
    Ok(LabeledEpoch {
        samples,
        sampling_rate_hz,
        stage: entry.stage,
        source_id: entry.source_id.clone(),
        epoch_index: entry.epoch_index,
    })
}
