//! Joint fine-tuning of the shared projection and the toy language model
//! on assembled chain-of-thought records. Frozen encoders supply the
//! patch tokens and pooled semantic features; gradients flow from the
//! text loss back through the fused sequence into the projector and the
//! prompt embeddings.

use super::toy::ToyLm;
use super::{assemble_inputs, LmError};
use crate::align::{expand, FusionMode, ProjectionW};
use crate::nn::{Adam, Module, ParamVisit};
use crate::vision::{TrainEpochLog, TrainLog};
use ndarray::{Array2, Axis, s};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One joint-training example: frozen visual features plus the question
/// and target answer text.
#[derive(Debug, Clone)]
pub struct JointExample {
    /// [P, C] low-level patch tokens.
    pub patch_tokens: Array2<f64>,
    /// [1, C] pooled high-level semantic feature.
    pub pooled_feature: Array2<f64>,
    pub question: String,
    pub target_text: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JointTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub fusion: FusionMode,
    pub max_answer_len: usize,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        JointTrainConfig {
            epochs: 2,
            learning_rate: 3e-4,
            seed: 0,
            fusion: FusionMode::PatchAligned,
            max_answer_len: 32,
        }
    }
}

struct JointModule<'a> {
    projection: &'a mut ProjectionW,
    lm: &'a mut ToyLm,
}

impl Module for JointModule<'_> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamVisit<'_>)) {
        self.projection.visit_params(&format!("{prefix}projection."), f);
        self.lm.visit_params(&format!("{prefix}lm."), f);
    }
}

/// Assemble the token sequence for one example under a fusion mode.
/// Returns the sequence and the row ranges of (visual, feature, prompt).
pub fn fuse_sequence(
    projection: &ProjectionW,
    lm: &ToyLm,
    patch_tokens: &Array2<f64>,
    pooled_feature: &Array2<f64>,
    question: &str,
    fusion: FusionMode,
) -> Result<Array2<f64>, LmError> {
    let h_v = projection
        .project(patch_tokens)
        .map_err(|e| LmError::ShapeMismatch(e.to_string()))?;
    let h_q = crate::lm::LanguageModel::embed(lm, question);
    match fusion {
        FusionMode::PatchAligned => {
            let h_f = projection
                .project(pooled_feature)
                .map_err(|e| LmError::ShapeMismatch(e.to_string()))?;
            let fused = (&h_v
                + &expand(&h_f, h_v.nrows()).map_err(|e| LmError::ShapeMismatch(e.to_string()))?)
                .to_owned();
            assemble_inputs(&h_v, &fused, &h_q)
        }
        FusionMode::RawFeature => {
            let h_f = projection
                .project(pooled_feature)
                .map_err(|e| LmError::ShapeMismatch(e.to_string()))?;
            assemble_inputs(&h_v, &h_f, &h_q)
        }
        FusionMode::NoFeature => {
            let empty = Array2::zeros((0, h_v.ncols()));
            assemble_inputs(&h_v, &empty, &h_q)
        }
    }
}

/// Train the projector and toy LM jointly with teacher forcing.
/// Deterministic under the seed. Returns the per-epoch loss plus the
/// fraction of training answers whose generated text names the target.
pub fn train_joint(
    projection: &mut ProjectionW,
    lm: &mut ToyLm,
    examples: &[JointExample],
    config: &JointTrainConfig,
) -> Result<TrainLog, LmError> {
    if examples.is_empty() {
        return Err(LmError::EmptyDataset);
    }
    let mut optimizer = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4a01_17ab);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let example = &examples[idx];
            let p = example.patch_tokens.nrows();
            let q_ids = lm.tokenize(&example.question);
            let target_ids = lm.tokenize(&example.target_text);

            let (h_v, cache_v) = projection
                .project_train(&example.patch_tokens)
                .map_err(|e| LmError::ShapeMismatch(e.to_string()))?;
            let (h_f, cache_f) = projection
                .project_train(&example.pooled_feature)
                .map_err(|e| LmError::ShapeMismatch(e.to_string()))?;
            let h_q = crate::lm::LanguageModel::embed(lm, &example.question);
            let t = h_q.nrows();

            let sequence = match config.fusion {
                FusionMode::PatchAligned => {
                    let fused = (&h_v
                        + &expand(&h_f, p).map_err(|e| LmError::ShapeMismatch(e.to_string()))?)
                        .to_owned();
                    assemble_inputs(&h_v, &fused, &h_q)?
                }
                FusionMode::RawFeature => assemble_inputs(&h_v, &h_f, &h_q)?,
                FusionMode::NoFeature => {
                    let empty = Array2::zeros((0, h_v.ncols()));
                    assemble_inputs(&h_v, &empty, &h_q)?
                }
            };

            let mut joint = JointModule { projection, lm };
            joint.zero_grad();
            let (loss, d_seq) = joint.lm.train_step(&sequence, &target_ids)?;
            if !loss.is_finite() {
                return Err(LmError::NonFiniteLoss { step, loss });
            }

            // Split the sequence gradient back onto its sources.
            let (d_hv, d_hf, d_hq): (Array2<f64>, Option<Array2<f64>>, Array2<f64>) =
                match config.fusion {
                    FusionMode::PatchAligned => {
                        let direct = d_seq.slice(s![0..p, ..]).to_owned();
                        let fused = d_seq.slice(s![p..2 * p, ..]);
                        let d_hv = (&direct + &fused).to_owned();
                        let d_hf = fused.sum_axis(Axis(0)).insert_axis(Axis(0));
                        let d_hq = d_seq.slice(s![2 * p.., ..]).to_owned();
                        (d_hv, Some(d_hf), d_hq)
                    }
                    FusionMode::RawFeature => (
                        d_seq.slice(s![0..p, ..]).to_owned(),
                        Some(d_seq.slice(s![p..p + 1, ..]).to_owned()),
                        d_seq.slice(s![p + 1.., ..]).to_owned(),
                    ),
                    FusionMode::NoFeature => (
                        d_seq.slice(s![0..p, ..]).to_owned(),
                        None,
                        d_seq.slice(s![p.., ..]).to_owned(),
                    ),
                };
            debug_assert_eq!(d_hq.nrows(), t.max(1));

            joint.projection.backward(&cache_v, &d_hv);
            if let Some(d_hf) = d_hf {
                joint.projection.backward(&cache_f, &d_hf);
            }
            if !q_ids.is_empty() {
                joint.lm.accumulate_embedding_grad(&q_ids, &d_hq);
            }
            optimizer.step(&mut joint);

            epoch_loss += loss;
            step += 1;
        }

        // Per-epoch answer accuracy on the training set, greedy decode.
        let mut hits = 0usize;
        for example in examples {
            let sequence = fuse_sequence(
                projection,
                lm,
                &example.patch_tokens,
                &example.pooled_feature,
                &example.question,
                config.fusion,
            )?;
            let answer = crate::lm::LanguageModel::generate(lm, &sequence, config.max_answer_len);
            let want = super::extract_stage(&example.target_text).ok().map(|p| p.label);
            let got = super::extract_stage(&answer).ok().map(|p| p.label);
            if want.is_some() && want == got {
                hits += 1;
            }
        }

        let row = TrainEpochLog {
            epoch,
            loss: epoch_loss / examples.len() as f64,
            accuracy: hits as f64 / examples.len() as f64,
        };
        log.final_loss = row.loss;
        log.epochs.push(row);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::super::toy::ToyLmParams;
    use super::*;
    use crate::stage::Stage;

    /// Synthetic joint task: the pooled feature is a one-hot class flag
    /// (scaled), patch tokens are noise. Patch-aligned fusion should learn
    /// to name the class.
    fn toy_examples(n_per_class: usize, feature_dim: usize, informative: bool) -> Vec<JointExample> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut out = Vec::new();
        for stage in Stage::ALL {
            for _ in 0..n_per_class {
                let patch_tokens = Array2::from_shape_fn((4, feature_dim), |_| {
                    rng.random_range(-0.5..0.5)
                });
                let mut pooled = Array2::zeros((1, feature_dim));
                if informative {
                    pooled[[0, stage.index()]] = 3.0;
                }
                out.push(JointExample {
                    patch_tokens,
                    pooled_feature: pooled,
                    question: "which sleep stage is it ?".into(),
                    target_text: format!("the answer is {} .", stage.name().to_lowercase()),
                });
            }
        }
        out
    }

    #[test]
    fn joint_training_learns_from_the_pooled_feature() {
        let feature_dim = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut projection = ProjectionW::new(&mut rng, feature_dim, 16);
        let mut lm = ToyLm::new(ToyLmParams { embedding_dim: 16, seed: 5 });
        let examples = toy_examples(6, feature_dim, true);
        let config = JointTrainConfig {
            epochs: 30,
            learning_rate: 3e-3,
            seed: 1,
            fusion: FusionMode::PatchAligned,
            max_answer_len: 16,
        };
        let log = train_joint(&mut projection, &mut lm, &examples, &config).unwrap();
        let final_acc = log.epochs.last().unwrap().accuracy;
        assert!(final_acc >= 0.9, "joint training stuck at accuracy {final_acc}");
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let feature_dim = 6;
        let examples = toy_examples(2, feature_dim, true);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut projection = ProjectionW::new(&mut rng, feature_dim, 12);
            let mut lm = ToyLm::new(ToyLmParams { embedding_dim: 12, seed: 9 });
            let config = JointTrainConfig {
                epochs: 2,
                learning_rate: 3e-4,
                seed: 4,
                fusion: FusionMode::PatchAligned,
                max_answer_len: 8,
            };
            train_joint(&mut projection, &mut lm, &examples, &config).unwrap().final_loss
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn empty_dataset_errs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut projection = ProjectionW::new(&mut rng, 4, 8);
        let mut lm = ToyLm::new(ToyLmParams { embedding_dim: 8, seed: 2 });
        assert!(matches!(
            train_joint(&mut projection, &mut lm, &[], &JointTrainConfig::default()),
            Err(LmError::EmptyDataset)
        ));
    }

    #[test]
    fn fusion_modes_change_sequence_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let projection = ProjectionW::new(&mut rng, 6, 12);
        let lm = ToyLm::new(ToyLmParams { embedding_dim: 12, seed: 3 });
        let patches = Array2::ones((4, 6));
        let pooled = Array2::ones((1, 6));
        let q = "stage ?";
        let t = lm.tokenize(q).len();
        let aligned =
            fuse_sequence(&projection, &lm, &patches, &pooled, q, FusionMode::PatchAligned).unwrap();
        assert_eq!(aligned.nrows(), 4 + 4 + t);
        let raw =
            fuse_sequence(&projection, &lm, &patches, &pooled, q, FusionMode::RawFeature).unwrap();
        assert_eq!(raw.nrows(), 4 + 1 + t);
        let none =
            fuse_sequence(&projection, &lm, &patches, &pooled, q, FusionMode::NoFeature).unwrap();
        assert_eq!(none.nrows(), 4 + t);
    }
}
