//! Stage-wise chain-of-thought data generation: one focused sub-prompt per
//! sleep stage, independent VLM queries (cached, with retry), and a
//! deterministic assembly of the five stage analyses into a final answer.

mod assemble;
mod client;
mod dataset;

pub use assemble::{assemble_answer, pick_summary, AssembledAnswer, SUMMARY_BANK};
pub use client::{
    image_digest, query_vlm, FlakyClient, HttpVlmClient, HttpVlmConfig, MockVlmClient,
    ResponseCache, VlmClient,
};
pub use dataset::{
    build_cot_dataset, export_jsonl, import_jsonl, to_instruction_tuning_json, CotDatasetConfig,
    CotInput, CotSummary,
};

use crate::stage::Stage;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CotError {
    #[error("no waveform profile for stage {0}")]
    MissingProfile(Stage),
    #[error("VLM service unavailable after {attempts} attempts: {last_error}")]
    ServiceUnavailable { attempts: usize, last_error: String },
    #[error("malformed VLM response: {0}")]
    MalformedResponse(String),
    #[error("missing stage analysis for {0}")]
    MissingAnalysis(Stage),
    #[error("no stage analysis reported evidence; cannot decide a label")]
    NoDecidableLabel,
    #[error("class {stage} has only {available} epochs, quota is {quota} (pass allow_short to proceed)")]
    InsufficientData { stage: Stage, available: usize, quota: usize },
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
}

/// Characteristic waveform vocabulary of one stage, used verbatim in its
/// sub-prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stage: Stage,
    pub descriptors: Vec<String>,
}

/// The five stage profiles: characteristic waveforms and
/// frequency-amplitude patterns per stage.
pub fn stage_profiles() -> Vec<StageProfile> {
    let mk = |stage: Stage, descriptors: &[&str]| StageProfile {
        stage,
        descriptors: descriptors.iter().map(|s| s.to_string()).collect(),
    };
    vec![
        mk(Stage::Wake, &["Alpha Waves"]),
        mk(Stage::N1, &["Low Amplitude Mixed Frequency (LAMF: Alpha, Beta)", "Vertex Sharp Waves"]),
        mk(Stage::N2, &["K-Complexes", "Sleep Spindles"]),
        mk(Stage::N3, &["Slow Waves"]),
        mk(Stage::Rem, &["Low Amplitude Mixed Frequency (LAMF: Beta, Theta)", "Sawtooth Waves"]),
    ]
}

/// Version tag baked into every prompt so regenerated datasets are
/// comparable only within a template version.
pub const PROMPT_TEMPLATE_VERSION: &str = "prompt-v1";

/// One stage-focused sub-prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubPrompt {
    pub stage: Stage,
    pub prompt_text: String,
}

impl SubPrompt {
    pub fn digest(&self) -> String {
        use sha2::Digest;
        hex::encode(&sha2::Sha256::digest(self.prompt_text.as_bytes())[..16])
    }
}

/// Build exactly five sub-prompts, one per stage, each naming that stage's
/// descriptors verbatim. Deterministic for a fixed template version.
pub fn build_stage_prompts() -> Result<Vec<SubPrompt>, CotError> {
    let profiles = stage_profiles();
    let mut prompts = Vec::with_capacity(Stage::ALL.len());
    for stage in Stage::ALL {
        let profile = profiles
            .iter()
            .find(|p| p.stage == stage)
            .ok_or(CotError::MissingProfile(stage))?;
        let features = profile.descriptors.join("; ");
        let prompt_text = format!(
            "[{version}] You are shown a 30-second single-channel EEG epoch rendered as a \
             waveform image. Focus only on the {stage} stage. Its characteristic features are: \
             {features}. Examine the waveform morphology and frequency-amplitude patterns and \
             state whether these features are present in this epoch, citing what you see. End \
             with exactly one line reading either \"Conclusion: present\" or \"Conclusion: absent\".",
            version = PROMPT_TEMPLATE_VERSION,
            stage = stage.name(),
        );
        prompts.push(SubPrompt { stage, prompt_text });
    }
    Ok(prompts)
}

/// One stage-level analysis returned by the VLM for one sub-prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAnalysis {
    pub stage: Stage,
    pub analysis_text: String,
    pub evidence_flag: bool,
}

/// Decide whether an analysis reports the stage's features as present.
///
/// The sub-prompts ask for a final "Conclusion: present|absent" line; when
/// a response skips it, fall back to a negation-aware keyword scan.
pub fn parse_evidence(text: &str) -> bool {
    let lower = text.to_lowercase();
    // Last explicit conclusion wins.
    if let Some(idx) = lower.rfind("conclusion:") {
        let tail = &lower[idx + "conclusion:".len()..];
        let word = tail.split_whitespace().next().unwrap_or("");
        if word.starts_with("present") {
            return true;
        }
        if word.starts_with("absent") {
            return false;
        }
    }
    const AFFIRM: [&str; 5] = ["present", "observed", "evident", "visible", "detected"];
    const NEGATE: [&str; 6] = ["no ", "not ", "absent", "without", "lacks", "unlikely"];
    for sentence in lower.split(['.', ';', '\n']) {
        let affirmed = AFFIRM.iter().any(|k| sentence.contains(k));
        let negated = NEGATE.iter().any(|k| sentence.contains(k));
        if affirmed && !negated {
            return true;
        }
    }
    false
}

/// One image-question-reasoning-answer training sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotRecord {
    pub image_path: String,
    pub question: String,
    pub reasoning: String,
    /// Decided stage; `None` when no analysis reported evidence.
    pub final_label: Option<Stage>,
    pub ground_truth: Stage,
    pub valid: bool,
    /// More than one stage reported evidence and the precedence rule chose.
    #[serde(default)]
    pub conflict: bool,
}

/// The overall stage-wise instruction paired with every record.
pub fn cot_question() -> String {
    format!(
        "[{PROMPT_TEMPLATE_VERSION}] This is a 30-second single-channel EEG epoch rendered as a \
         waveform image. Reason stage by stage: for each of Wake, N1, N2, N3 and REM, describe \
         whether its characteristic waveform features and frequency-amplitude patterns are \
         present. Then conclude with the single most consistent stage name."
    )
}

/// The ablation question without stage-wise reasoning.
pub fn direct_question() -> String {
    format!(
        "[{PROMPT_TEMPLATE_VERSION}] This is a 30-second single-channel EEG epoch rendered as a \
         waveform image. Which sleep stage is it? Answer with exactly one of: Wake, N1, N2, N3, REM."
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_five_prompts_one_per_stage() {
        let prompts = build_stage_prompts().unwrap();
        assert_eq!(prompts.len(), 5);
        for (prompt, stage) in prompts.iter().zip(Stage::ALL) {
            assert_eq!(prompt.stage, stage);
        }
    }

    #[test]
    fn n2_prompt_names_its_hallmarks() {
        let prompts = build_stage_prompts().unwrap();
        let n2 = &prompts[Stage::N2.index()];
        assert!(n2.prompt_text.contains("K-Complexes"));
        assert!(n2.prompt_text.contains("Sleep Spindles"));
    }

    #[test]
    fn n3_prompt_names_slow_waves() {
        let prompts = build_stage_prompts().unwrap();
        assert!(prompts[Stage::N3.index()].prompt_text.contains("Slow Waves"));
    }

    #[test]
    fn every_prompt_contains_every_descriptor_verbatim() {
        let prompts = build_stage_prompts().unwrap();
        for profile in stage_profiles() {
            let prompt = &prompts[profile.stage.index()];
            for descriptor in &profile.descriptors {
                assert!(
                    prompt.prompt_text.contains(descriptor.as_str()),
                    "{} prompt lacks {descriptor:?}",
                    profile.stage
                );
            }
        }
    }

    #[test]
    fn prompts_are_deterministic() {
        assert_eq!(build_stage_prompts().unwrap(), build_stage_prompts().unwrap());
    }

    #[test]
    fn evidence_parsing_prefers_the_conclusion_line() {
        assert!(parse_evidence("Spindles everywhere.\nConclusion: present"));
        assert!(!parse_evidence("Some alpha burst visible early on.\nConclusion: absent"));
        // Last conclusion wins.
        assert!(parse_evidence("Conclusion: absent\nOn review: Conclusion: present"));
    }

    #[test]
    fn evidence_fallback_is_negation_aware() {
        assert!(parse_evidence("Clear slow waves are observed across the epoch."));
        assert!(!parse_evidence("No slow waves are observed."));
        assert!(!parse_evidence("The waveform is nondescript here."));
    }
}
