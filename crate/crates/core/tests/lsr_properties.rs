//! Oracle and property tests for LM-supervised retriever tuning.

use std::cell::Cell;

use ralab_core::corpus::{build_store, ChunkStore, Document, WordLimits};
use ralab_core::lm::{Generation, LanguageModel, ModelConfig, PromptLm, Vocabulary};
use ralab_core::retriever::{softmax_scores, EmbeddingIndex, RetrievalContext, Retriever};
use ralab_core::retriever_finetune::{
    example_gradient, example_loss, kl_loss, lsr_distribution, lsr_train, mean_kl, precompute_supervision, targets,
    LSRBatch, LSRExample, LsrConfig, LsrNorm, Origin,
};
use ralab_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Kb {
    vocab: Vocabulary,
    store: ChunkStore,
    retriever: Retriever,
    index: EmbeddingIndex,
}

fn kb(seed: u64) -> Kb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs: Vec<Document> = (0..40)
        .map(|i| {
            let words: Vec<String> = (0..6).map(|_| format!("w{}", rng.gen_range(0..60))).collect();
            Document::new("kb", format!("item{i} {}", words.join(" ")))
        })
        .collect();
    let mut texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    texts.push("Background: Q: A:".into());
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), 1000);
    let (store, _) = build_store(&docs, &WordLimits::uniform(50)).unwrap();
    let retriever = Retriever::new_independent(vocab.clone(), 12, seed).unwrap();
    let index = EmbeddingIndex::build(&retriever, &store).unwrap();
    Kb {
        vocab,
        store,
        retriever,
        index,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, kb: &Kb, k: usize) -> LSRBatch {
    let x = (0..4).map(|_| format!("w{}", rng.gen_range(0..60))).collect::<Vec<_>>().join(" ");
    let mut ids: Vec<usize> = (0..kb.store.len()).collect();
    for i in 0..k {
        let j = rng.gen_range(i..ids.len());
        ids.swap(i, j);
    }
    ids.truncate(k);
    LSRBatch {
        example_id: 0,
        example: LSRExample::corpus(x, "y".into()),
        scores: vec![0.0; k],
        lm_log_probs: (0..k).map(|_| rng.gen_range(-6.0..-0.05)).collect(),
        chunk_ids: ids,
        y_tokens: 1,
    }
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let kb = kb(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut r = kb.retriever.clone();
    // Larger query rows give scores with enough spread for a sharp check.
    for v in &mut r.query.table {
        *v *= 20.0;
    }
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 20 {
        attempts += 1;
        assert!(attempts < 200);
        let batch = random_batch(&mut rng, &kb, 5);
        let target = lsr_distribution(&batch.lm_log_probs, 1, 0.3, LsrNorm::Sequence).unwrap();
        let mut grad = vec![0.0; r.query.table.len()];
        example_gradient(&r, &kb.index, &batch, &target, 1.0, &mut grad).unwrap();
        let ids = r.vocab.encode(&batch.example.x);
        let tok = ids[rng.gen_range(0..ids.len())] as usize;
        let entry = tok * r.query.dim + rng.gen_range(0..r.query.dim);
        let analytic = grad[entry];
        if analytic.abs() < 1e-6 {
            continue;
        }
        let p = r.query.table[entry];
        let h = 1e-3f32;
        let (hi, lo) = (p + h, p - h);
        let mut plus = r.clone();
        plus.query.table[entry] = hi;
        let mut minus = r.clone();
        minus.query.table[entry] = lo;
        let fp = example_loss(&plus, &kb.index, &batch, &target).unwrap().value;
        let fm = example_loss(&minus, &kb.index, &batch, &target).unwrap().value;
        let numeric = (fp - fm) / (hi as f64 - lo as f64);
        let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs());
        assert!(rel <= 1e-4, "entry {entry}: analytic {analytic} numeric {numeric} rel {rel}");
        checked += 1;
    }
}

#[test]
fn kl_is_non_negative_and_zero_only_on_equality() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let k = rng.gen_range(2..8);
        let a = softmax_scores(&(0..k).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<_>>());
        let b = softmax_scores(&(0..k).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<_>>());
        let kl = kl_loss(&a, &b).unwrap().value;
        assert!(kl >= 0.0);
        let max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if max_diff > 1e-6 {
            assert!(kl > 0.0);
        }
        assert!(kl_loss(&a, &a).unwrap().value.abs() <= 1e-12);
    }
}

#[test]
fn loss_ignores_a_common_score_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let k = rng.gen_range(2..10);
        let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let target = softmax_scores(&(0..k).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
        let shift = rng.gen_range(-50.0..50.0);
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let a = kl_loss(&softmax_scores(&scores), &target).unwrap().value;
        let b = kl_loss(&softmax_scores(&shifted), &target).unwrap().value;
        assert!((a - b).abs() < 1e-9);
    }
}

fn frozen(kb: &Kb) -> Retriever {
    let mut r = kb.retriever.clone();
    r.document.trainable = false;
    r
}

#[test]
fn planted_preference_is_learned() {
    let kb = kb(5);
    let r = frozen(&kb);
    let x = "w1 w2 w3";
    let q = r.encode_query(x).unwrap();
    let score = |r: &Retriever, c: usize| {
        let q = r.encode_query(x).unwrap();
        q.values().iter().zip(kb.index.row(c)).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()
    };
    // Pick A as the chunk the retriever currently likes least, B the most.
    let all: Vec<f64> = (0..kb.store.len())
        .map(|c| q.values().iter().zip(kb.index.row(c)).map(|(&a, &b)| a as f64 * b as f64).sum())
        .collect();
    let a = (0..all.len()).min_by(|&i, &j| all[i].total_cmp(&all[j])).unwrap();
    let b = (0..all.len()).max_by(|&i, &j| all[i].total_cmp(&all[j])).unwrap();
    let batch = LSRBatch {
        example_id: 0,
        example: LSRExample::corpus(x.into(), "y".into()),
        chunk_ids: vec![a, b],
        scores: vec![all[a], all[b]],
        lm_log_probs: vec![-0.1, -3.0],
        y_tokens: 1,
    };
    let before = score(&r, a) - score(&r, b);
    assert!(before < 0.0);
    let cfg = LsrConfig {
        steps: 100,
        batch_size: 1,
        lr: 1e-2,
        tau: 0.1,
        norm: LsrNorm::Sequence,
        ..Default::default()
    };
    let (trained, log) = lsr_train(r.clone(), &kb.index, &[batch.clone()], &[], &cfg).unwrap();
    let after = score(&trained, a) - score(&trained, b);
    assert!(after > before, "{before} -> {after}");
    assert!(log.kl.last().unwrap() < &log.kl[0]);
    assert_eq!(trained.document, r.document);
}

#[test]
fn training_keeps_targets_and_documents_fixed_and_lowers_kl() {
    let kb = kb(6);
    let r = frozen(&kb);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batches: Vec<LSRBatch> = (0..30).map(|_| random_batch(&mut rng, &kb, 6)).collect();
    let cfg = LsrConfig {
        steps: 150,
        batch_size: 8,
        lr: 5e-3,
        tau: 0.5,
        norm: LsrNorm::Sequence,
        ..Default::default()
    };
    let t0 = targets(&batches, cfg.tau, cfg.norm).unwrap();
    let before = mean_kl(&r, &kb.index, &batches, &t0).unwrap();
    let doc_bits: Vec<u32> = r.document.table.iter().map(|v| v.to_bits()).collect();
    let (trained, _) = lsr_train(r, &kb.index, &batches, &[], &cfg).unwrap();
    let after = mean_kl(&trained, &kb.index, &batches, &t0).unwrap();
    assert!(after < before, "{before} -> {after}");
    assert_eq!(targets(&batches, cfg.tau, cfg.norm).unwrap(), t0);
    let after_bits: Vec<u32> = trained.document.table.iter().map(|v| v.to_bits()).collect();
    assert_eq!(doc_bits, after_bits);
    assert_eq!(EmbeddingIndex::build(&trained, &kb.store).unwrap(), kb.index);
}

#[test]
fn unfrozen_document_encoder_is_rejected() {
    let kb = kb(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batches = vec![random_batch(&mut rng, &kb, 3)];
    let mut r = kb.retriever.clone();
    r.document.trainable = true;
    let err = lsr_train(r, &kb.index, &batches, &[], &LsrConfig::default()).unwrap_err();
    assert!(matches!(err, Error::ContractViolation(_)));
}

/// Counts scoring calls made through the LM.
struct Counting<'a> {
    lm: &'a LanguageModel,
    calls: Cell<usize>,
}

impl PromptLm for Counting<'_> {
    fn window(&self) -> usize {
        self.lm.window()
    }
    fn prompt_len(&self, prompt: &str) -> usize {
        PromptLm::prompt_len(self.lm, prompt)
    }
    fn answer_len(&self, answer: &str) -> usize {
        self.lm.answer_len(answer)
    }
    fn answer_log_prob(&self, prompt: &str, answer: &str) -> Result<f64> {
        self.calls.set(self.calls.get() + 1);
        self.lm.answer_log_prob(prompt, answer)
    }
    fn generate(&self, prompt: &str, max_new: usize) -> Result<Generation> {
        self.lm.generate(prompt, max_new)
    }
    fn identity(&self) -> [u8; 32] {
        self.lm.identity()
    }
}

#[test]
fn supervision_is_cached_and_deterministic() {
    let kb = kb(10);
    let config = ModelConfig {
        vocab_size: 0,
        window: 64,
        width: 16,
        layers: 1,
        heads: 2,
        ffn: 16,
    };
    let lm = LanguageModel::new(kb.vocab.clone(), config, 11).unwrap();
    let counting = Counting {
        lm: &lm,
        calls: Cell::new(0),
    };
    let ctx = RetrievalContext::new(&kb.retriever, &kb.index, &kb.store).unwrap();
    let examples: Vec<LSRExample> = (0..5)
        .map(|i| LSRExample {
            x: format!("w{i} w{}", i + 10),
            y: format!("item{i}"),
            prompt: format!("Q: w{i}\nA:"),
            origin: Origin::Mti,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sup.lsr");
    let first = precompute_supervision(&examples, &ctx, &counting, 10, Some(&path)).unwrap();
    assert_eq!(counting.calls.get(), 50);
    assert!(first.iter().all(|b| b.k() == 10 && b.lm_log_probs.iter().all(|v| v.is_finite())));
    let again = precompute_supervision(&examples, &ctx, &counting, 10, Some(&path)).unwrap();
    assert_eq!(counting.calls.get(), 50);
    assert_eq!(again, first);

    let other = dir.path().join("again.lsr");
    precompute_supervision(&examples, &ctx, &lm, 10, Some(&other)).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&other).unwrap());

    // Different inputs miss the cache.
    precompute_supervision(&examples[..2], &ctx, &counting, 10, Some(&path)).unwrap();
    assert_eq!(counting.calls.get(), 70);
    assert!(precompute_supervision(&examples, &ctx, &lm, 1, None).is_err());
}
