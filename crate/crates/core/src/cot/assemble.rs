//! Deterministic assembly of five stage analyses into the final reasoning
//! text and decided label.

use super::{CotError, StageAnalysis};
use crate::stage::Stage;
use sha2::Digest;

/// Closing-sentence templates; `{stage}` is replaced by the decided label.
pub const SUMMARY_BANK: [&str; 8] = [
    "Overall, the evidence is most consistent with {stage}.",
    "Taking all five analyses together, this epoch is best scored as {stage}.",
    "Weighing the observed features, the epoch corresponds to {stage}.",
    "The waveform pattern points to {stage} as the final classification.",
    "Considering morphology and frequency content, this is a {stage} epoch.",
    "On balance, the most defensible stage for this epoch is {stage}.",
    "The characteristic activity identified above indicates {stage}.",
    "Integrating the stage-wise findings, the answer is {stage}.",
];

/// Stage precedence when several analyses report evidence: the most
/// specific markers outrank the low-amplitude mixed-frequency stages.
/// Slow waves, then K-complexes/spindles, then sawtooth (REM), vertex
/// sharp (N1), and sustained alpha (Wake) last. A rule table, not
/// clinical truth.
pub const CONFLICT_PRECEDENCE: [Stage; 5] =
    [Stage::N3, Stage::N2, Stage::Rem, Stage::N1, Stage::Wake];

/// Deterministic template choice: a seeded hash of the image digest.
pub fn pick_summary(selection_seed: u64, image_digest: &str) -> &'static str {
    let mut hasher = sha2::Sha256::new();
    hasher.update(selection_seed.to_le_bytes());
    hasher.update(image_digest.as_bytes());
    let h = hasher.finalize();
    let idx = u64::from_le_bytes(h[..8].try_into().unwrap()) as usize % SUMMARY_BANK.len();
    SUMMARY_BANK[idx]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledAnswer {
    /// Five stage sections in fixed order followed by one summary sentence.
    pub reasoning: String,
    pub final_label: Stage,
    pub summary_sentence: String,
    /// Whether more than one stage reported evidence.
    pub conflict: bool,
}

/// Combine the five stage analyses into a coherent final answer.
///
/// Sections appear in fixed stage order; exactly one summary sentence is
/// drawn deterministically from the bank; the label is the highest-
/// precedence stage with reported evidence.
pub fn assemble_answer(
    analyses: &[StageAnalysis],
    selection_seed: u64,
    image_digest: &str,
) -> Result<AssembledAnswer, CotError> {
    let mut by_stage: [Option<&StageAnalysis>; 5] = [None; 5];
    for analysis in analyses {
        by_stage[analysis.stage.index()] = Some(analysis);
    }
    for stage in Stage::ALL {
        match by_stage[stage.index()] {
            Some(a) if !a.analysis_text.is_empty() => {}
            _ => return Err(CotError::MissingAnalysis(stage)),
        }
    }

    let evidence: Vec<Stage> = Stage::ALL
        .into_iter()
        .filter(|s| by_stage[s.index()].unwrap().evidence_flag)
        .collect();
    let final_label = CONFLICT_PRECEDENCE
        .into_iter()
        .find(|s| evidence.contains(s))
        .ok_or(CotError::NoDecidableLabel)?;
    let conflict = evidence.len() > 1;

    let summary_sentence =
        pick_summary(selection_seed, image_digest).replace("{stage}", final_label.name());
    let mut reasoning = String::new();
    for stage in Stage::ALL {
        let analysis = by_stage[stage.index()].unwrap();
        reasoning.push_str(stage.name());
        reasoning.push_str(": ");
        reasoning.push_str(analysis.analysis_text.trim());
        reasoning.push('\n');
    }
    reasoning.push_str(&summary_sentence);

    Ok(AssembledAnswer { reasoning, final_label, summary_sentence, conflict })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analysis(stage: Stage, evidence: bool) -> StageAnalysis {
        StageAnalysis {
            stage,
            analysis_text: format!(
                "{} features look {}.",
                stage,
                if evidence { "present" } else { "absent" }
            ),
            evidence_flag: evidence,
        }
    }

    fn full_set(with_evidence: &[Stage]) -> Vec<StageAnalysis> {
        Stage::ALL.iter().map(|&s| analysis(s, with_evidence.contains(&s))).collect()
    }

    #[test]
    fn single_evidence_decides_the_label() {
        let out = assemble_answer(&full_set(&[Stage::N3]), 7, "img0").unwrap();
        assert_eq!(out.final_label, Stage::N3);
        assert!(!out.conflict);
        // Five sections plus the summary line.
        assert_eq!(out.reasoning.lines().count(), 6);
        for s in Stage::ALL {
            assert!(out.reasoning.contains(&format!("{}: ", s.name())));
        }
        assert!(out.reasoning.ends_with(&out.summary_sentence));
        assert!(out.summary_sentence.contains("N3"));
    }

    #[test]
    fn assembly_is_deterministic() {
        let a = assemble_answer(&full_set(&[Stage::N1]), 11, "imgX").unwrap();
        let b = assemble_answer(&full_set(&[Stage::N1]), 11, "imgX").unwrap();
        assert_eq!(a, b);
        let c = assemble_answer(&full_set(&[Stage::N1]), 12, "imgX").unwrap();
        assert_eq!(a.final_label, c.final_label);
    }

    #[test]
    fn summary_bank_selection_varies_with_the_image() {
        let sentences: std::collections::HashSet<&str> =
            (0..50).map(|i| pick_summary(3, &format!("img{i}"))).collect();
        assert!(sentences.len() > 1, "selection never varied");
        for s in &sentences {
            assert!(SUMMARY_BANK.contains(s));
        }
    }

    #[test]
    fn missing_analysis_errs() {
        let four: Vec<StageAnalysis> =
            full_set(&[Stage::N2]).into_iter().filter(|a| a.stage != Stage::Rem).collect();
        assert!(matches!(
            assemble_answer(&four, 0, "img"),
            Err(CotError::MissingAnalysis(Stage::Rem))
        ));
    }

    #[test]
    fn no_evidence_is_undecidable() {
        assert!(matches!(
            assemble_answer(&full_set(&[]), 0, "img"),
            Err(CotError::NoDecidableLabel)
        ));
    }

    /// Enumerate the rule over every 2-stage conflict pair.
    #[test]
    fn conflicts_resolve_by_specificity_precedence() {
        let rank = |s: Stage| CONFLICT_PRECEDENCE.iter().position(|&p| p == s).unwrap();
        for a in Stage::ALL {
            for b in Stage::ALL {
                if a.index() >= b.index() {
                    continue;
                }
                let out = assemble_answer(&full_set(&[a, b]), 5, "pair").unwrap();
                let want = if rank(a) < rank(b) { a } else { b };
                assert_eq!(out.final_label, want, "conflict {a} vs {b}");
                assert!(out.conflict, "conflict {a} vs {b} must be flagged");
            }
        }
    }
}
