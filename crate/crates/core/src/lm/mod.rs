//! Small trainable autoregressive language model.

pub mod batch;
pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod scoring;
pub mod vocab;

use rand::SeedableRng;
use sha2::{Digest, Sha256};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use batch::{PackedBatch, PackedSequence};
pub use model::{log_sum_exp, softmax, ModelConfig, Transformer};
pub use optim::{Adam, AdamConfig, CosineSchedule};
pub use scoring::{AnswerScore, Scorer, COMPLETION_CONTEXT};
pub use vocab::{TokenSequence, Vocabulary, BOS, EOS, PAD, UNK};

/// Output of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub ids: Vec<u32>,
    pub text: String,
    /// Log-probability of the emitted tokens given the prompt.
    pub log_prob: f64,
}

/// Text-level interface to a conditional LM, as used by retrieval fusion
/// and supervision. Prompts are BOS-prefixed by the implementation.
pub trait PromptLm {
    fn window(&self) -> usize;
    /// Tokens the prompt occupies, including any sequence-start marker.
    fn prompt_len(&self, prompt: &str) -> usize;
    fn answer_len(&self, answer: &str) -> usize;
    fn answer_log_prob(&self, prompt: &str, answer: &str) -> Result<f64>;
    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<Generation>;
    /// Digest of everything that determines the model's outputs, used to key
    /// caches of its scores.
    fn identity(&self) -> [u8; 32];
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub vocab: Vocabulary,
    pub net: Transformer,
    /// Optimizer steps applied so far.
    pub step: u64,
    pub seed: u64,
}

impl LanguageModel {
    /// Fresh model; `config.vocab_size` is taken from `vocab`.
    pub fn new(vocab: Vocabulary, mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Transformer::new(config, &mut rng)?;
        Ok(Self { vocab, net, step: 0, seed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn window(&self) -> usize {
        self.net.config.window
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        self.vocab.tokenize(text)
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        self.vocab.detokenize(ids)
    }

    /// `[BOS] ++ tokenize(prompt)`.
    pub fn prompt_ids(&self, prompt: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.vocab.encode(prompt));
        ids
    }

    fn check_fits(&self, len: usize) -> Result<()> {
        if len > self.window() {
            Err(Error::ContextOverflow {
                needed: len,
                window: self.window(),
            })
        } else {
            Ok(())
        }
    }

    /// Distribution of the token following `prefix`.
    pub fn next_token_dist(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(softmax(&self.next_token_logits(prefix)?))
    }

    fn next_token_logits(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::EmptyInput("prefix must hold at least one token".into()));
        }
        self.check_fits(prefix.len())?;
        let fwd = self.net.forward(prefix, &model::single_segment(prefix.len()))?;
        Ok(self.net.logits_at(&fwd, prefix.len() - 1))
    }

    /// `Σ_t log p(target_t | prefix ∘ target_<t)`.
    pub fn log_prob(&self, target: &[u32], prefix: &[u32]) -> Result<f64> {
        if target.is_empty() {
            return Ok(0.0);
        }
        if prefix.is_empty() {
            return Err(Error::EmptyInput("prefix must hold at least one token".into()));
        }
        let mut seq = prefix.to_vec();
        seq.extend_from_slice(target);
        self.check_fits(seq.len())?;
        let mut targets = vec![false; seq.len()];
        targets[prefix.len()..].fill(true);
        let (nll, _) = self
            .net
            .target_loss(&seq, &model::single_segment(seq.len()), &targets, None, 0.0)?;
        Ok(-nll)
    }

    /// Argmax decoding with ties to the lowest id. Stops at EOS, any stop
    /// token (neither is emitted), `max_new_tokens`, or a full window.
    pub fn greedy_generate(&self, prefix: &[u32], max_new_tokens: usize, stop: &[u32]) -> Result<(Vec<u32>, f64)> {
        self.check_fits(prefix.len())?;
        let mut seq = prefix.to_vec();
        let mut out = Vec::new();
        let mut log_prob = 0.0;
        while out.len() < max_new_tokens && seq.len() < self.window() {
            let logits = self.next_token_logits(&seq)?;
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            let id = best as u32;
            if id == EOS || stop.contains(&id) {
                break;
            }
            log_prob += logits[best] - log_sum_exp(&logits);
            out.push(id);
            seq.push(id);
        }
        Ok((out, log_prob))
    }

    pub fn score_answer(&self, prompt: &str, answer: &str, scorer: Scorer) -> Result<AnswerScore> {
        let ans = self.vocab.encode(answer);
        if ans.is_empty() {
            return Err(Error::InvalidAnswer("answer has no tokens".into()));
        }
        let lp = self.log_prob(&ans, &self.prompt_ids(prompt))?;
        let value = scorer.apply(lp, ans.len(), answer.trim().chars().count(), || {
            self.log_prob(&ans, &self.prompt_ids(COMPLETION_CONTEXT))
        })?;
        Ok(AnswerScore { scorer, value })
    }

    /// Mean masked cross-entropy of the batch and its gradient.
    pub fn batch_gradient(&self, batch: &PackedBatch) -> Result<(f64, Vec<f64>)> {
        let mut grads = vec![0f64; self.net.num_params()];
        let count = batch.num_targets();
        if count == 0 {
            return Ok((0.0, grads));
        }
        let scale = 1.0 / count as f64;
        let mut total = 0.0;
        for seq in &batch.sequences {
            seq.validate(self.window())?;
            let (loss, _) = self
                .net
                .target_loss(&seq.tokens, &seq.seg, &seq.targets, Some(&mut grads), scale)?;
            total += loss;
        }
        Ok((total * scale, grads))
    }

    /// Summed (not averaged) masked loss of a batch, without gradients.
    pub fn batch_loss_sum(&self, batch: &PackedBatch) -> Result<f64> {
        let mut total = 0.0;
        for seq in &batch.sequences {
            seq.validate(self.window())?;
            total += self.net.target_loss(&seq.tokens, &seq.seg, &seq.targets, None, 0.0)?.0;
        }
        Ok(total)
    }

    /// One optimizer update on `batch`; returns the pre-update mean loss.
    pub fn train_step(&mut self, batch: &PackedBatch, opt: &mut Adam, lr: f64) -> Result<f64> {
        let (loss, grads) = self.batch_gradient(batch)?;
        opt.update(&mut self.net.params, &grads, lr);
        self.step += 1;
        Ok(loss)
    }
}

/// Stop set for text generation: newline ends an answer line.
fn default_stops(vocab: &Vocabulary) -> Vec<u32> {
    vec![vocab.id(vocab::NEWLINE)]
}

impl PromptLm for LanguageModel {
    fn window(&self) -> usize {
        LanguageModel::window(self)
    }

    fn prompt_len(&self, prompt: &str) -> usize {
        1 + self.vocab.count_tokens(prompt)
    }

    fn answer_len(&self, answer: &str) -> usize {
        self.vocab.count_tokens(answer)
    }

    fn answer_log_prob(&self, prompt: &str, answer: &str) -> Result<f64> {
        self.log_prob(&self.vocab.encode(answer), &self.prompt_ids(prompt))
    }

    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<Generation> {
        let (ids, log_prob) = self.greedy_generate(&self.prompt_ids(prompt), max_new_tokens, &default_stops(&self.vocab))?;
        Ok(Generation {
            text: self.vocab.detokenize(&ids),
            ids,
            log_prob,
        })
    }

    fn identity(&self) -> [u8; 32] {
        Sha256::digest(checkpoint::to_bytes(self)).into()
    }
}
