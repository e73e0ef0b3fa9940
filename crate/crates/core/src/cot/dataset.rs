//! Dataset construction: per-class sampling, the sub-prompt -> query ->
//! assemble chain per epoch, validity filtering, and the export formats.

use super::client::{image_digest, query_vlm, ResponseCache, VlmClient};
use super::{assemble_answer, build_stage_prompts, cot_question, direct_question, CotError, CotRecord};
use crate::stage::Stage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Duration;

/// One labeled epoch image offered to the generator.
#[derive(Debug, Clone)]
pub struct CotInput {
    pub image_path: String,
    pub image_png: Vec<u8>,
    pub ground_truth: Stage,
}

#[derive(Debug, Clone)]
pub struct CotDatasetConfig {
    /// Epochs sampled per class for answer generation.
    pub per_class_quota: usize,
    pub seed: u64,
    /// Proceed with whatever a short class has instead of erroring.
    pub allow_short: bool,
    pub max_retries: usize,
    pub backoff: Duration,
    /// Stage-wise reasoning question; `false` selects the direct question
    /// (the reasoning ablation).
    pub use_cot_question: bool,
}

impl Default for CotDatasetConfig {
    fn default() -> Self {
        CotDatasetConfig {
            per_class_quota: 1300,
            seed: 0,
            allow_short: false,
            max_retries: 3,
            backoff: Duration::from_millis(100),
            use_cot_question: true,
        }
    }
}

/// Attempt/validity counts per class, in stage order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CotSummary {
    pub attempted: usize,
    pub valid: usize,
    pub per_class_attempted: [usize; 5],
    pub per_class_valid: [usize; 5],
}

/// Run the stage-wise chain over up to `per_class_quota` epochs per class.
///
/// Sampling is deterministic under the seed; records keep their selection
/// order. Invalid records (undecidable or wrong final label) are retained
/// with `valid = false` for audit. Service failures abort the build.
pub fn build_cot_dataset(
    inputs: &[CotInput],
    config: &CotDatasetConfig,
    client: &dyn VlmClient,
    cache: &ResponseCache,
) -> Result<(Vec<CotRecord>, CotSummary), CotError> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); Stage::ALL.len()];
    for (i, input) in inputs.iter().enumerate() {
        by_class[input.ground_truth.index()].push(i);
    }
    let mut selected = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < config.per_class_quota && !config.allow_short {
            return Err(CotError::InsufficientData {
                stage: Stage::from_index(c).unwrap(),
                available: members.len(),
                quota: config.per_class_quota,
            });
        }
        let mut shuffled = members.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ (0xc07_da7au64.wrapping_mul(c as u64 + 1)),
        );
        shuffled.shuffle(&mut rng);
        shuffled.truncate(config.per_class_quota);
        selected.extend(shuffled);
    }
    selected.sort_unstable();

    let prompts = build_stage_prompts()?;
    let question = if config.use_cot_question { cot_question() } else { direct_question() };

    let results: Vec<Result<CotRecord, CotError>> = selected
        .par_iter()
        .map(|&idx| {
            let input = &inputs[idx];
            let digest = image_digest(&input.image_png);
            let mut analyses = Vec::with_capacity(prompts.len());
            for prompt in &prompts {
                analyses.push(query_vlm(
                    client,
                    cache,
                    &input.image_png,
                    prompt,
                    config.max_retries,
                    config.backoff,
                )?);
            }
            let record = match assemble_answer(&analyses, config.seed, &digest) {
                Ok(answer) => CotRecord {
                    image_path: input.image_path.clone(),
                    question: question.clone(),
                    reasoning: answer.reasoning,
                    final_label: Some(answer.final_label),
                    ground_truth: input.ground_truth,
                    valid: answer.final_label == input.ground_truth,
                    conflict: answer.conflict,
                },
                Err(CotError::NoDecidableLabel) => {
                    let mut reasoning = String::new();
                    for analysis in &analyses {
                        reasoning.push_str(analysis.stage.name());
                        reasoning.push_str(": ");
                        reasoning.push_str(analysis.analysis_text.trim());
                        reasoning.push('\n');
                    }
                    reasoning.push_str("No stage could be determined from the stage-wise analyses.");
                    CotRecord {
                        image_path: input.image_path.clone(),
                        question: question.clone(),
                        reasoning,
                        final_label: None,
                        ground_truth: input.ground_truth,
                        valid: false,
                        conflict: false,
                    }
                }
                Err(other) => return Err(other),
            };
            Ok(record)
        })
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut summary = CotSummary::default();
    for result in results {
        let record = result?;
        summary.attempted += 1;
        summary.per_class_attempted[record.ground_truth.index()] += 1;
        if record.valid {
            summary.valid += 1;
            summary.per_class_valid[record.ground_truth.index()] += 1;
        }
        records.push(record);
    }
    Ok((records, summary))
}

/// One JSON record per line.
pub fn export_jsonl(records: &[CotRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn import_jsonl(text: &str) -> Result<Vec<CotRecord>, CotError> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| CotError::MalformedRecord {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Convert valid records into the conversation-style instruction-tuning
/// JSON consumed by external VLM trainers.
pub fn to_instruction_tuning_json(records: &[CotRecord]) -> String {
    let items: Vec<serde_json::Value> = records
        .iter()
        .filter(|r| r.valid)
        .enumerate()
        .map(|(i, r)| {
            serde_json::json!({
                "id": format!("{i:06}"),
                "image": r.image_path,
                "conversations": [
                    { "from": "human", "value": format!("<image>\n{}", r.question) },
                    { "from": "gpt", "value": r.reasoning },
                ],
            })
        })
        .collect();
    serde_json::to_string_pretty(&items).expect("items serialize")
}

#[cfg(test)]
mod tests {
    use super::super::client::MockVlmClient;
    use super::*;

    fn inputs(per_class: usize) -> Vec<CotInput> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            for k in 0..per_class {
                out.push(CotInput {
                    image_path: format!("img/{stage}_{k}.png"),
                    image_png: format!("png:{stage}:{k}").into_bytes(),
                    ground_truth: stage,
                });
            }
        }
        out
    }

    fn correct_client(inputs: &[CotInput]) -> MockVlmClient {
        MockVlmClient::always_correct(
            inputs.iter().map(|i| (image_digest(&i.image_png), i.ground_truth)),
        )
    }

    fn quick_config(quota: usize) -> CotDatasetConfig {
        CotDatasetConfig {
            per_class_quota: quota,
            seed: 9,
            backoff: Duration::ZERO,
            ..Default::default()
        }
    }

    #[test]
    fn always_correct_client_validates_everything() {
        let inputs = inputs(3);
        let client = correct_client(&inputs);
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let (records, summary) =
            build_cot_dataset(&inputs, &quick_config(3), &client, &cache).unwrap();
        assert_eq!(summary.attempted, 15);
        assert_eq!(summary.valid, 15);
        assert!(records.iter().all(|r| r.valid && r.final_label == Some(r.ground_truth)));
    }

    #[test]
    fn never_labeling_client_keeps_invalid_records_for_audit() {
        let inputs = inputs(2);
        let client = MockVlmClient::never_labels();
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let (records, summary) =
            build_cot_dataset(&inputs, &quick_config(2), &client, &cache).unwrap();
        assert_eq!(summary.attempted, 10);
        assert_eq!(summary.valid, 0);
        assert_eq!(records.len(), 10);
        assert!(records.iter().all(|r| !r.valid && r.final_label.is_none()));
    }

    #[test]
    fn short_class_errs_without_allow_short() {
        let inputs = inputs(2);
        let client = correct_client(&inputs);
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let err = build_cot_dataset(&inputs, &quick_config(5), &client, &cache).unwrap_err();
        assert!(matches!(err, CotError::InsufficientData { quota: 5, available: 2, .. }));

        let mut config = quick_config(5);
        config.allow_short = true;
        let (records, _) = build_cot_dataset(&inputs, &config, &client, &cache).unwrap();
        assert_eq!(records.len(), 10);
    }

    #[test]
    fn build_is_byte_reproducible_under_a_seed() {
        let inputs = inputs(4);
        let client = correct_client(&inputs);
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let config = quick_config(2);
        let (a, _) = build_cot_dataset(&inputs, &config, &client, &cache).unwrap();
        let (b, _) = build_cot_dataset(&inputs, &config, &client, &cache).unwrap();
        assert_eq!(export_jsonl(&a), export_jsonl(&b));

        let mut other_seed = config.clone();
        other_seed.seed = 10;
        let (c, _) = build_cot_dataset(&inputs, &other_seed, &client, &cache).unwrap();
        let picks = |rs: &[CotRecord]| rs.iter().map(|r| r.image_path.clone()).collect::<Vec<_>>();
        assert_ne!(picks(&a), picks(&c), "different seeds should sample differently");
    }

    #[test]
    fn jsonl_round_trips() {
        let inputs = inputs(2);
        let client = correct_client(&inputs);
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let (records, _) = build_cot_dataset(&inputs, &quick_config(2), &client, &cache).unwrap();
        let text = export_jsonl(&records);
        let parsed = import_jsonl(&text).unwrap();
        assert_eq!(parsed, records);
    }

    #[test]
    fn instruction_tuning_export_keeps_only_valid_records() {
        let records = vec![
            CotRecord {
                image_path: "a.png".into(),
                question: "q".into(),
                reasoning: "r".into(),
                final_label: Some(Stage::N2),
                ground_truth: Stage::N2,
                valid: true,
                conflict: false,
            },
            CotRecord {
                image_path: "b.png".into(),
                question: "q".into(),
                reasoning: "r".into(),
                final_label: None,
                ground_truth: Stage::N3,
                valid: false,
                conflict: false,
            },
        ];
        let json = to_instruction_tuning_json(&records);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        let items = value.as_array().unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0]["image"], "a.png");
        assert!(items[0]["conversations"][0]["value"].as_str().unwrap().starts_with("<image>\n"));
    }
}
