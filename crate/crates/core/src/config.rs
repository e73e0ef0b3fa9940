//! Declarative run configuration shared by every pipeline command.
//! One seed drives all derived randomness; ablation presets select the
//! fusion wiring and the reasoning mode.

use crate::align::{EncoderParams, FusionMode};
use crate::lm::LmParams;
use crate::render::RenderConfig;
use crate::vision::{VisionConfig, VisionTrainConfig};
use serde::{Deserialize, Serialize};
use sha2::Digest;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("dataset path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("unknown {kind} id {id:?}; known: {known}")]
    UnknownId { kind: &'static str, id: String, known: String },
}

/// Ablation presets (fusion wiring and reasoning mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationPreset {
    /// Full model: patch-aligned feature fusion, stage-wise reasoning.
    #[default]
    PatchAligned,
    /// The raw feature token appended instead of patch-aligned fusion.
    RawHf,
    /// No high-level feature token at all.
    WoFeatureEmbedding,
    /// Patch-aligned fusion but direct answers without reasoning.
    WoCot,
}


impl AblationPreset {
    pub fn name(self) -> &'static str {
        match self {
            AblationPreset::PatchAligned => "patch-aligned",
            AblationPreset::RawHf => "raw-hf",
            AblationPreset::WoFeatureEmbedding => "wo-feature-embedding",
            AblationPreset::WoCot => "wo-cot",
        }
    }

    pub fn parse(name: &str) -> Option<AblationPreset> {
        match name {
            "patch-aligned" => Some(AblationPreset::PatchAligned),
            "raw-hf" => Some(AblationPreset::RawHf),
            "wo-feature-embedding" => Some(AblationPreset::WoFeatureEmbedding),
            "wo-cot" => Some(AblationPreset::WoCot),
            _ => None,
        }
    }

    pub fn fusion(self) -> FusionMode {
        match self {
            AblationPreset::PatchAligned | AblationPreset::WoCot => FusionMode::PatchAligned,
            AblationPreset::RawHf => FusionMode::RawFeature,
            AblationPreset::WoFeatureEmbedding => FusionMode::NoFeature,
        }
    }

    /// Whether records carry the stage-wise reasoning question.
    pub fn uses_cot(self) -> bool {
        !matches!(self, AblationPreset::WoCot)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// EDF/EDF+ recordings to ingest.
    pub edf_paths: Vec<PathBuf>,
    pub channel_label: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { edf_paths: Vec::new(), channel_label: "EEG Fpz-Cz".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    /// Zero-phase forward-backward application; `false` is the causal
    /// single-pass ablation.
    pub zero_phase: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { low_cut_hz: 0.5, high_cut_hz: 35.0, zero_phase: true }
    }
}

/// VLM client selection for CoT generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CotClientConfig {
    /// "mock-correct", "mock-never-labels", or "http".
    pub kind: String,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_s: u64,
    pub max_retries: usize,
    /// Requests per minute ceiling for the HTTP client (0 = unlimited).
    pub rate_limit_per_min: u32,
}

impl Default for CotClientConfig {
    fn default() -> Self {
        CotClientConfig {
            kind: "mock-correct".into(),
            endpoint: String::new(),
            model: "gpt-4".into(),
            api_key_env: "SOMNIA_VLM_API_KEY".into(),
            timeout_s: 60,
            max_retries: 3,
            rate_limit_per_min: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CotConfig {
    pub client: CotClientConfig,
    pub per_class_quota: usize,
    pub allow_short: bool,
}

impl Default for CotConfig {
    fn default() -> Self {
        CotConfig { client: CotClientConfig::default(), per_class_quota: 1300, allow_short: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub max_answer_len: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig { epochs: 2, learning_rate: 3e-4, max_answer_len: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub filter: FilterConfig,
    pub render: RenderConfig,
    pub vision: VisionConfig,
    pub vision_train: VisionTrainConfig,
    pub encoder_id: String,
    pub encoder: EncoderParams,
    pub lm_id: String,
    pub lm: LmParams,
    pub cot: CotConfig,
    pub joint: JointConfig,
    pub preset: AblationPreset,
    pub test_per_class: usize,
    /// The single seed every derived random stream descends from.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            filter: FilterConfig::default(),
            render: RenderConfig::default(),
            vision: VisionConfig::default(),
            vision_train: VisionTrainConfig::default(),
            encoder_id: "toy-patch".into(),
            encoder: EncoderParams::default(),
            lm_id: "toy-lm".into(),
            lm: LmParams::default(),
            cot: CotConfig::default(),
            joint: JointConfig::default(),
            preset: AblationPreset::default(),
            test_per_class: 75,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Purpose tags for deriving per-stage seeds from the run seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedPurpose {
    Vision,
    Encoder,
    Lm,
    Split,
    Cot,
    Joint,
    Synth,
}

impl RunConfig {
    /// Stable digest over the canonical serialized config.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(&sha2::Sha256::digest(canonical.as_bytes())[..8])
    }

    /// All derived randomness funnels through the one seed field.
    pub fn derived_seed(&self, purpose: SeedPurpose) -> u64 {
        let tag = match purpose {
            SeedPurpose::Vision => 0x7151_0001u64,
            SeedPurpose::Encoder => 0x7151_0002,
            SeedPurpose::Lm => 0x7151_0003,
            SeedPurpose::Split => 0x7151_0004,
            SeedPurpose::Cot => 0x7151_0005,
            SeedPurpose::Joint => 0x7151_0006,
            SeedPurpose::Synth => 0x7151_0007,
        };
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17) ^ tag
    }

    /// Validate everything before any side effect.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dataset.channel_label.trim().is_empty() {
            return Err(ConfigError::Invalid("channel label is empty".into()));
        }
        if !(self.filter.low_cut_hz > 0.0 && self.filter.low_cut_hz < self.filter.high_cut_hz) {
            return Err(ConfigError::Invalid(format!(
                "filter band [{}, {}] is not ordered",
                self.filter.low_cut_hz, self.filter.high_cut_hz
            )));
        }
        self.render
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.vision.width_scale > 0.0 && self.vision.width_scale <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "width_scale {} outside (0, 1]",
                self.vision.width_scale
            )));
        }
        if self.vision.input_size.0 != 3 {
            return Err(ConfigError::Invalid("vision input must have 3 channels".into()));
        }
        let known_encoders = ["toy-patch"];
        if !known_encoders.contains(&self.encoder_id.as_str()) {
            return Err(ConfigError::UnknownId {
                kind: "encoder",
                id: self.encoder_id.clone(),
                known: known_encoders.join(", "),
            });
        }
        let known_lms = ["toy-lm"];
        if !known_lms.contains(&self.lm_id.as_str()) {
            return Err(ConfigError::UnknownId {
                kind: "language model",
                id: self.lm_id.clone(),
                known: known_lms.join(", "),
            });
        }
        let known_clients = ["mock-correct", "mock-never-labels", "http"];
        if !known_clients.contains(&self.cot.client.kind.as_str()) {
            return Err(ConfigError::UnknownId {
                kind: "cot client",
                id: self.cot.client.kind.clone(),
                known: known_clients.join(", "),
            });
        }
        if self.cot.client.kind == "http" && self.cot.client.endpoint.is_empty() {
            return Err(ConfigError::Invalid("http client needs an endpoint".into()));
        }
        for path in &self.dataset.edf_paths {
            if !path.exists() {
                return Err(ConfigError::MissingPath(path.clone()));
            }
        }
        Ok(())
    }
}
