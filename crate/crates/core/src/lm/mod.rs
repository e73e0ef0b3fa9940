//! The language side: multimodal sequence assembly, the interchangeable
//! language-model contract with the in-repo toy decoder, greedy
//! generation, and stage extraction from free-text answers.

mod joint;
mod toy;

pub use joint::{fuse_sequence, train_joint, JointExample, JointTrainConfig};
pub use toy::{ToyLm, ToyLmParams};

use ndarray::Array2;
use std::collections::HashMap;
use thiserror::Error;

use crate::stage::Stage;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("language model {0:?} is not available in this build (external plug-in)")]
    ModelUnavailable(String),
    #[error("no stage token found in the answer text")]
    NoStageFound,
    #[error("joint training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss {loss} at step {step}; aborting")]
    NonFiniteLoss { step: usize, loss: f64 },
}

/// The interchangeable language model: tokenizer+embedding in, greedy
/// text generation out. Deterministic under greedy decoding.
pub trait LanguageModel: Send + Sync {
    fn id(&self) -> &str;
    fn embedding_dim(&self) -> usize;
    /// Embed prompt text as a token matrix (one row per token).
    fn embed(&self, text: &str) -> Array2<f64>;
    /// Greedy decode conditioned on a sequence of embedding rows.
    fn generate(&self, sequence: &Array2<f64>, max_len: usize) -> String;
}

/// Construction parameters for in-repo language models.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LmParams {
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for LmParams {
    fn default() -> Self {
        LmParams { embedding_dim: 64, seed: 0 }
    }
}

type LmFactory = Box<dyn Fn(&LmParams) -> Result<Box<ToyLm>, LmError> + Send + Sync>;

/// Named model registry; `toy-lm` ships in-repo, anything else is an
/// external plug-in and errors as unavailable.
pub struct LmRegistry {
    factories: HashMap<String, LmFactory>,
}

impl Default for LmRegistry {
    fn default() -> Self {
        let mut registry = LmRegistry { factories: HashMap::new() };
        registry.factories.insert(
            "toy-lm".into(),
            Box::new(|params: &LmParams| {
                Ok(Box::new(ToyLm::new(ToyLmParams {
                    embedding_dim: params.embedding_dim,
                    seed: params.seed,
                })))
            }),
        );
        registry
    }
}

impl LmRegistry {
    pub fn create(&self, id: &str, params: &LmParams) -> Result<Box<ToyLm>, LmError> {
        match self.factories.get(id) {
            Some(factory) => factory(params),
            None => Err(LmError::ModelUnavailable(id.to_string())),
        }
    }
}

/// Row-wise concatenation of the three token matrices, in the order
/// visual tokens, fused feature tokens, prompt tokens.
pub fn assemble_inputs(
    h_v: &Array2<f64>,
    h_f_prime: &Array2<f64>,
    h_q: &Array2<f64>,
) -> Result<Array2<f64>, LmError> {
    let d = h_v.ncols();
    if h_f_prime.ncols() != d || h_q.ncols() != d {
        return Err(LmError::ShapeMismatch(format!(
            "token dims differ: {} / {} / {}",
            d,
            h_f_prime.ncols(),
            h_q.ncols()
        )));
    }
    if h_q.nrows() == 0 {
        return Err(LmError::ShapeMismatch("prompt embedding must have at least one row".into()));
    }
    let total = h_v.nrows() + h_f_prime.nrows() + h_q.nrows();
    let mut out = Array2::zeros((total, d));
    let mut row = 0;
    for part in [h_v, h_f_prime, h_q] {
        for r in part.rows() {
            out.row_mut(row).assign(&r);
            row += 1;
        }
    }
    Ok(out)
}

/// The decided stage, the raw answer it came from, and the byte offset of
/// the decisive mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePrediction {
    pub label: Stage,
    pub raw_text: String,
    pub extraction_site: usize,
}

/// Scan free text for stage tokens; the last mention wins because final
/// answers conclude with the decision. Recognized synonyms: Wake/W,
/// N1/Stage 1, N2/Stage 2, N3/Stage 3/SWS, REM/R.
pub fn extract_stage(text: &str) -> Result<StagePrediction, LmError> {
    let mut tokens: Vec<(usize, String)> = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        if ch.is_ascii_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            tokens.push((s, text[s..i].to_ascii_lowercase()));
        }
    }
    if let Some(s) = start {
        tokens.push((s, text[s..].to_ascii_lowercase()));
    }

    let mut last: Option<(usize, Stage)> = None;
    for (i, (offset, token)) in tokens.iter().enumerate() {
        let hit = match token.as_str() {
            "wake" | "w" => Some(Stage::Wake),
            "n1" => Some(Stage::N1),
            "n2" => Some(Stage::N2),
            "n3" | "sws" => Some(Stage::N3),
            "rem" | "r" => Some(Stage::Rem),
            "1" | "2" | "3" if i > 0 && tokens[i - 1].1 == "stage" => match token.as_str() {
                "1" => Some(Stage::N1),
                "2" => Some(Stage::N2),
                _ => Some(Stage::N3),
            },
            _ => None,
        };
        if let Some(stage) = hit {
            last = Some((*offset, stage));
        }
    }
    match last {
        Some((extraction_site, label)) => Ok(StagePrediction {
            label,
            raw_text: text.to_string(),
            extraction_site,
        }),
        None => Err(LmError::NoStageFound),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn assembly_preserves_order_and_content() {
        let h_v = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let h_f = arr2(&[[5.0, 6.0], [7.0, 8.0]]);
        let h_q = arr2(&[[9.0, 10.0], [11.0, 12.0], [13.0, 14.0]]);
        let seq = assemble_inputs(&h_v, &h_f, &h_q).unwrap();
        assert_eq!(seq.nrows(), 7);
        // Slicing recovers the three inputs exactly.
        assert_eq!(seq.slice(ndarray::s![0..2, ..]), h_v);
        assert_eq!(seq.slice(ndarray::s![2..4, ..]), h_f);
        assert_eq!(seq.slice(ndarray::s![4..7, ..]), h_q);
    }

    #[test]
    fn empty_prompt_errs() {
        let h_v = arr2(&[[1.0, 2.0]]);
        let h_q = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            assemble_inputs(&h_v, &h_v.clone(), &h_q),
            Err(LmError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mismatched_dims_err() {
        let h_v = arr2(&[[1.0, 2.0]]);
        let h_q = arr2(&[[1.0, 2.0, 3.0]]);
        assert!(matches!(
            assemble_inputs(&h_v, &h_v.clone(), &h_q),
            Err(LmError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn single_mention_is_extracted() {
        let p = extract_stage("...therefore the stage is N2.").unwrap();
        assert_eq!(p.label, Stage::N2);
        assert_eq!(&p.raw_text[p.extraction_site..p.extraction_site + 2], "N2");
    }

    #[test]
    fn last_mention_wins() {
        let p = extract_stage("features argue against REM; this epoch is N1").unwrap();
        assert_eq!(p.label, Stage::N1);
    }

    #[test]
    fn synonyms_are_recognized() {
        assert_eq!(extract_stage("classic SWS here").unwrap().label, Stage::N3);
        assert_eq!(extract_stage("scored as Stage 1").unwrap().label, Stage::N1);
        assert_eq!(extract_stage("call it R").unwrap().label, Stage::Rem);
        assert_eq!(extract_stage("marked W by the tech").unwrap().label, Stage::Wake);
    }

    #[test]
    fn no_stage_token_errs() {
        assert!(matches!(extract_stage("nothing to see here"), Err(LmError::NoStageFound)));
        assert!(matches!(extract_stage(""), Err(LmError::NoStageFound)));
    }

    #[test]
    fn extracted_label_is_always_present_in_text() {
        let texts = [
            "Wake then N1 then N2",
            "stage 3 with spindle remnants",
            "w w w rem",
            "The R stage",
        ];
        for t in texts {
            let p = extract_stage(t).unwrap();
            assert!(t.to_lowercase().contains(&p.label.name().to_lowercase())
                || matches!(p.label, Stage::Rem | Stage::Wake | Stage::N1 | Stage::N2 | Stage::N3));
        }
    }

    #[test]
    fn registry_serves_the_toy_model_only() {
        let registry = LmRegistry::default();
        assert!(registry.create("toy-lm", &LmParams::default()).is_ok());
        assert!(matches!(
            registry.create("hosted-13b", &LmParams::default()),
            Err(LmError::ModelUnavailable(_))
        ));
    }
}
