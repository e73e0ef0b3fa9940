//! The in-repo toy language model: a small recurrent decoder over a fixed
//! word vocabulary, conditioned on the mean of the multimodal token
//! sequence. Big enough to learn the toy staging task end to end, small
//! enough to train fully on a laptop CPU.

use super::LmError;
use crate::cot::{cot_question, direct_question, SUMMARY_BANK};
use crate::nn::{gaussian, Module, Param, ParamVisit};
use crate::stage::Stage;
use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToyLmParams {
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for ToyLmParams {
    fn default() -> Self {
        ToyLmParams { embedding_dim: 64, seed: 0 }
    }
}

/// Split into lowercase word tokens; hyphens stay inside words, any other
/// punctuation becomes its own token.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        let c = ch.to_ascii_lowercase();
        if c.is_ascii_alphanumeric() || c == '-' {
            word.push(c);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// The fixed vocabulary: every token the pipeline's prompts, summary bank
/// and fallback sentences can produce, plus the specials.
fn build_vocab() -> Vec<String> {
    let mut corpus = String::new();
    for template in SUMMARY_BANK {
        for stage in Stage::ALL {
            corpus.push_str(&template.replace("{stage}", stage.name()));
            corpus.push(' ');
        }
    }
    corpus.push_str(&cot_question());
    corpus.push(' ');
    corpus.push_str(&direct_question());
    corpus.push(' ');
    corpus.push_str("No stage could be determined from the stage-wise analyses.");
    corpus.push(' ');
    for stage in Stage::ALL {
        corpus.push_str(stage.name());
        corpus.push(' ');
    }

    let mut words: Vec<String> = tokenize_text(&corpus)
        .into_iter()
        .collect::<std::collections::BTreeSet<String>>()
        .into_iter()
        .collect();
    let mut vocab = vec!["<bos>".to_string(), "<eos>".to_string(), "<unk>".to_string()];
    vocab.append(&mut words);
    vocab
}

/// Recurrent decoder: h_t = tanh(W_h h_{t-1} + W_x E[y_{t-1}] + W_c c + b)
/// with c the mean of the conditioning sequence rows, and a linear
/// vocabulary head.
pub struct ToyLm {
    pub params: ToyLmParams,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    pub embedding: Param, // [V, D]
    w_hidden: Param,      // [D, D]
    w_input: Param,       // [D, D]
    w_context: Param,     // [D, D]
    bias: Param,          // [D]
    w_out: Param,         // [V, D]
    b_out: Param,         // [V]
}

impl ToyLm {
    pub fn new(params: ToyLmParams) -> ToyLm {
        let vocab = build_vocab();
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let d = params.embedding_dim;
        let v = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x70b0_11ed);
        ToyLm {
            vocab,
            index,
            embedding: Param::new(gaussian(&mut rng, &[v, d], 0.1)),
            w_hidden: Param::new(gaussian(&mut rng, &[d, d], (1.0 / d as f64).sqrt())),
            w_input: Param::new(gaussian(&mut rng, &[d, d], (1.0 / d as f64).sqrt())),
            w_context: Param::new(gaussian(&mut rng, &[d, d], (1.0 / d as f64).sqrt())),
            bias: Param::new(ArrayD::zeros(vec![d])),
            w_out: Param::new(gaussian(&mut rng, &[v, d], (1.0 / d as f64).sqrt())),
            b_out: Param::new(ArrayD::zeros(vec![v])),
            params,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        tokenize_text(text).iter().map(|t| self.token_id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != BOS && id != EOS)
            .map(|&id| self.vocab[id].as_str())
            .collect();
        words.join(" ")
    }

    fn mat(&self, p: &Param) -> Array2<f64> {
        p.value.view().into_dimensionality::<Ix2>().unwrap().to_owned()
    }

    fn vec1(&self, p: &Param) -> Array1<f64> {
        p.value.view().into_dimensionality::<Ix1>().unwrap().to_owned()
    }

    fn context_of(&self, sequence: &Array2<f64>) -> Array1<f64> {
        sequence.mean_axis(ndarray::Axis(0)).expect("non-empty sequence")
    }

    fn embedding_row(&self, id: usize) -> Array1<f64> {
        self.embedding
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .row(id)
            .to_owned()
    }
}

impl ToyLm {
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        w_h: &Array2<f64>,
        w_x: &Array2<f64>,
        w_c: &Array2<f64>,
        b: &Array1<f64>,
        h: &Array1<f64>,
        x: &Array1<f64>,
        c: &Array1<f64>,
    ) -> Array1<f64> {
        let mut a = w_h.dot(h) + w_x.dot(x) + w_c.dot(c) + b;
        a.mapv_inplace(f64::tanh);
        a
    }

    /// Greedy decode conditioned on embedding rows; deterministic.
    pub fn generate_ids(&self, sequence: &Array2<f64>, max_len: usize) -> Vec<usize> {
        if sequence.nrows() == 0 || max_len == 0 {
            return Vec::new();
        }
        let c = self.context_of(sequence);
        let (w_h, w_x, w_c) = (self.mat(&self.w_hidden), self.mat(&self.w_input), self.mat(&self.w_context));
        let b = self.vec1(&self.bias);
        let w_o = self.mat(&self.w_out);
        let b_o = self.vec1(&self.b_out);

        let d = self.params.embedding_dim;
        let mut h = Array1::zeros(d);
        let mut prev = BOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let x = self.embedding_row(prev);
            h = self.step(&w_h, &w_x, &w_c, &b, &h, &x, &c);
            let logits = w_o.dot(&h) + &b_o;
            let next = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(EOS);
            if next == EOS {
                break;
            }
            out.push(next);
            prev = next;
        }
        out
    }

    /// Teacher-forced step: returns the mean cross-entropy over the target
    /// tokens (with EOS appended) and the gradient with respect to every
    /// row of the conditioning sequence. Parameter gradients accumulate.
    pub fn train_step(
        &mut self,
        sequence: &Array2<f64>,
        target_ids: &[usize],
    ) -> Result<(f64, Array2<f64>), LmError> {
        if sequence.nrows() == 0 {
            return Err(LmError::ShapeMismatch("empty conditioning sequence".into()));
        }
        let d = self.params.embedding_dim;
        if sequence.ncols() != d {
            return Err(LmError::ShapeMismatch(format!(
                "sequence dim {} != embedding dim {d}",
                sequence.ncols()
            )));
        }
        let mut targets = target_ids.to_vec();
        targets.push(EOS);
        let steps = targets.len();
        let c = self.context_of(sequence);

        let (w_h, w_x, w_c) = (self.mat(&self.w_hidden), self.mat(&self.w_input), self.mat(&self.w_context));
        let b = self.vec1(&self.bias);
        let w_o = self.mat(&self.w_out);
        let b_o = self.vec1(&self.b_out);

        // Forward with caches.
        let mut prev_ids = Vec::with_capacity(steps);
        let mut hs: Vec<Array1<f64>> = Vec::with_capacity(steps + 1);
        hs.push(Array1::zeros(d));
        let mut softmaxes: Vec<Array1<f64>> = Vec::with_capacity(steps);
        let mut loss = 0.0;
        let mut prev = BOS;
        for &target in &targets {
            prev_ids.push(prev);
            let x = self.embedding_row(prev);
            let h = self.step(&w_h, &w_x, &w_c, &b, hs.last().unwrap(), &x, &c);
            let logits = w_o.dot(&h) + &b_o;
            let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let exp = logits.mapv(|v| (v - max).exp());
            let sum = exp.sum();
            loss += -(logits[target] - max - sum.ln());
            softmaxes.push(exp / sum);
            hs.push(h);
            prev = target;
        }
        loss /= steps as f64;
        if !loss.is_finite() {
            return Err(LmError::NonFiniteLoss { step: 0, loss });
        }

        // Backward through time.
        let scale = 1.0 / steps as f64;
        let mut d_carry: Array1<f64> = Array1::zeros(d);
        let mut d_context: Array1<f64> = Array1::zeros(d);
        {
            let mut g_emb = self.embedding.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            let mut g_wh = self.w_hidden.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            let mut g_wx = self.w_input.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            let mut g_wc = self.w_context.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            let mut g_b = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            let mut g_wo = self.w_out.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            let mut g_bo = self.b_out.grad.view_mut().into_dimensionality::<Ix1>().unwrap();

            let emb = self.embedding.value.view().into_dimensionality::<Ix2>().unwrap();
            for t in (0..steps).rev() {
                let mut d_logits = softmaxes[t].clone();
                d_logits[targets[t]] -= 1.0;
                d_logits.mapv_inplace(|v| v * scale);

                // Head gradients.
                for (vi, &dv) in d_logits.iter().enumerate() {
                    if dv != 0.0 {
                        for (k, &hv) in hs[t + 1].iter().enumerate() {
                            g_wo[[vi, k]] += dv * hv;
                        }
                        g_bo[vi] += dv;
                    }
                }
                let mut d_h = w_o.t().dot(&d_logits);
                d_h += &d_carry;

                let h_t = &hs[t + 1];
                let d_a: Array1<f64> =
                    d_h.iter().zip(h_t.iter()).map(|(&g, &h)| g * (1.0 - h * h)).collect();

                let x = emb.row(prev_ids[t]);
                for (r, &da) in d_a.iter().enumerate() {
                    if da == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        g_wh[[r, k]] += da * hs[t][k];
                        g_wx[[r, k]] += da * x[k];
                        g_wc[[r, k]] += da * c[k];
                    }
                    g_b[r] += da;
                }
                let d_x = w_x.t().dot(&d_a);
                for (k, &dv) in d_x.iter().enumerate() {
                    g_emb[[prev_ids[t], k]] += dv;
                }
                d_context += &w_c.t().dot(&d_a);
                d_carry = w_h.t().dot(&d_a);
            }
        }

        // Context is the row mean, so every sequence row shares dc / rows.
        let rows = sequence.nrows();
        let mut d_sequence = Array2::zeros((rows, d));
        let shared = d_context.mapv(|v| v / rows as f64);
        for mut row in d_sequence.rows_mut() {
            row.assign(&shared);
        }
        Ok((loss, d_sequence))
    }

    /// Route gradients from prompt-token rows back into the embedding.
    pub fn accumulate_embedding_grad(&mut self, token_ids: &[usize], grads: &Array2<f64>) {
        assert_eq!(token_ids.len(), grads.nrows());
        let mut g_emb = self.embedding.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        for (&id, row) in token_ids.iter().zip(grads.rows()) {
            for (k, &v) in row.iter().enumerate() {
                g_emb[[id, k]] += v;
            }
        }
    }
}

impl super::LanguageModel for ToyLm {
    fn id(&self) -> &str {
        "toy-lm"
    }

    fn embedding_dim(&self) -> usize {
        self.params.embedding_dim
    }

    fn embed(&self, text: &str) -> Array2<f64> {
        let ids = self.tokenize(text);
        let emb = self.embedding.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::zeros((ids.len().max(1), self.params.embedding_dim));
        if ids.is_empty() {
            // An empty prompt still needs one row; use the BOS embedding.
            out.row_mut(0).assign(&emb.row(BOS));
        } else {
            for (r, &id) in ids.iter().enumerate() {
                out.row_mut(r).assign(&emb.row(id));
            }
        }
        out
    }

    fn generate(&self, sequence: &Array2<f64>, max_len: usize) -> String {
        self.decode(&self.generate_ids(sequence, max_len))
    }
}

impl Module for ToyLm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamVisit<'_>)) {
        f(format!("{prefix}embedding"), self.embedding.visit());
        f(format!("{prefix}w_hidden"), self.w_hidden.visit());
        f(format!("{prefix}w_input"), self.w_input.visit());
        f(format!("{prefix}w_context"), self.w_context.visit());
        f(format!("{prefix}bias"), self.bias.visit());
        f(format!("{prefix}w_out"), self.w_out.visit());
        f(format!("{prefix}b_out"), self.b_out.visit());
    }
}

#[cfg(test)]
mod tests {
    use super::super::LanguageModel;
    use super::*;

    fn lm() -> ToyLm {
        ToyLm::new(ToyLmParams { embedding_dim: 16, seed: 3 })
    }

    #[test]
    fn vocabulary_covers_the_pipeline_sentences() {
        let lm = lm();
        for stage in Stage::ALL {
            let sentence = SUMMARY_BANK[0].replace("{stage}", stage.name());
            let ids = lm.tokenize(&sentence);
            assert!(ids.iter().all(|&id| id != UNK), "OOV in {sentence:?}");
        }
        let q = lm.tokenize(&cot_question());
        assert!(q.iter().all(|&id| id != UNK));
    }

    #[test]
    fn embed_has_one_row_per_token() {
        let lm = lm();
        let h_q = lm.embed("the answer is N2.");
        assert_eq!(h_q.nrows(), lm.tokenize("the answer is N2.").len());
        assert_eq!(h_q.ncols(), 16);
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let lm = lm();
        let seq = Array2::from_shape_fn((4, 16), |(r, c)| ((r * 16 + c) as f64 * 0.3).sin());
        let a = lm.generate(&seq, 12);
        let b = lm.generate(&seq, 12);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_max_length_gives_empty_text() {
        let lm = lm();
        let seq = Array2::ones((2, 16));
        assert_eq!(lm.generate(&seq, 0), "");
    }

    #[test]
    fn train_step_gradients_match_finite_differences() {
        let mut lm = lm();
        let seq = Array2::from_shape_fn((3, 16), |(r, c)| ((r + c) as f64 * 0.21).cos() * 0.5);
        let targets = lm.tokenize("the answer is n3 .");
        lm.zero_grad();
        let (_, d_seq) = lm.train_step(&seq, &targets).unwrap();

        let loss_of = |seq: &Array2<f64>| {
            let mut fresh = super::super::toy::ToyLm::new(ToyLmParams { embedding_dim: 16, seed: 3 });
            fresh.train_step(seq, &targets).unwrap().0
        };
        let step = 1e-5;
        for &(r, k) in &[(0usize, 0usize), (1, 7), (2, 15)] {
            let mut sp = seq.clone();
            sp[[r, k]] += step;
            let mut sm = seq.clone();
            sm[[r, k]] -= step;
            let numeric = (loss_of(&sp) - loss_of(&sm)) / (2.0 * step);
            assert!(
                (numeric - d_seq[[r, k]]).abs() < 1e-6,
                "dSeq[{r},{k}]: numeric {numeric} vs analytic {}",
                d_seq[[r, k]]
            );
        }

        // One parameter gradient, finite-differenced through a fresh model.
        let base = ToyLm::new(ToyLmParams { embedding_dim: 16, seed: 3 });
        let analytic = {
            let mut m = ToyLm::new(ToyLmParams { embedding_dim: 16, seed: 3 });
            m.zero_grad();
            m.train_step(&seq, &targets).unwrap();
            m.w_context.grad.clone()
        };
        let probe = |delta: f64| {
            let mut m = ToyLm::new(ToyLmParams { embedding_dim: 16, seed: 3 });
            m.w_context.value.assign(&base.w_context.value);
            let idx = [2usize, 5usize];
            m.w_context.value[ndarray::IxDyn(&idx)] += delta;
            m.train_step(&seq, &targets).unwrap().0
        };
        let numeric = (probe(step) - probe(-step)) / (2.0 * step);
        let a = analytic[ndarray::IxDyn(&[2, 5])];
        assert!((numeric - a).abs() < 1e-6, "dW_c[2,5]: numeric {numeric} vs analytic {a}");
    }

    #[test]
    fn a_few_steps_memorize_a_fixed_answer() {
        let mut lm = lm();
        let seq = Array2::from_shape_fn((5, 16), |(r, c)| ((r * 3 + c) as f64 * 0.17).sin());
        let target = "integrating the stage-wise findings , the answer is n2 .";
        let target_ids = lm.tokenize(target);
        let mut opt = crate::nn::Adam::new(0.01);
        for _ in 0..300 {
            lm.zero_grad();
            lm.train_step(&seq, &target_ids).unwrap();
            opt.step(&mut lm);
        }
        let out = lm.generate(&seq, 24);
        assert_eq!(out, target);
    }
}
