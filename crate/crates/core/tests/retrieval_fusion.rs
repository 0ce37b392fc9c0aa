//! Oracle and property tests for dense search and retrieval fusion.

use proptest::prelude::*;
use ralab_core::corpus::{build_store, Chunk, ChunkStore, Document, WordLimits};
use ralab_core::fusion::{ensemble_choice, ensemble_generate, mixture_log_prob};
use ralab_core::lm::{Generation, LanguageModel, ModelConfig, PromptLm, Scorer, Vocabulary};
use ralab_core::retriever::{
    retrieval_distribution, score, search, softmax_scores, EmbeddingIndex, RetrievalResult, Retrieved, Retriever,
};
use ralab_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_text(rng: &mut ChaCha8Rng, words: &[String], len: usize) -> String {
    (0..len)
        .map(|_| words[rng.gen_range(0..words.len())].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_store(seed: u64, n: usize) -> (Vocabulary, ChunkStore, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
    let docs: Vec<Document> = (0..n)
        .map(|i| {
            let len = rng.gen_range(3..20);
            Document::new("synthetic", format!("d{i} {}", random_text(&mut rng, &words, len)))
        })
        .collect();
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let vocab = Vocabulary::build(texts, 8192);
    let (store, _) = build_store(&docs, &WordLimits::uniform(50)).unwrap();
    (vocab, store, words)
}

#[test]
fn search_equals_full_scan() {
    let (vocab, store, words) = random_store(1, 1000);
    assert_eq!(store.len(), 1000);
    let retriever = Retriever::new_independent(vocab, 16, 2).unwrap();
    let index = EmbeddingIndex::build(&retriever, &store).unwrap();
    let rows: Vec<_> = store
        .chunks()
        .iter()
        .map(|c| retriever.encode_document(&c.text).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for qi in 0..200 {
        let len = rng.gen_range(1..6);
        let query = random_text(&mut rng, &words, len);
        let q = retriever.encode_query(&query).unwrap();
        let mut full: Vec<(usize, f64)> = rows.iter().enumerate().map(|(i, r)| (i, score(&q, r).unwrap())).collect();
        full.sort_by(|a, b| {
            if a.1 > b.1 {
                std::cmp::Ordering::Less
            } else if a.1 < b.1 {
                std::cmp::Ordering::Greater
            } else {
                a.0.cmp(&b.0)
            }
        });
        let k = [1, 5, 10, 50][qi % 4];
        let got = search(&retriever, &index, &query, k).unwrap();
        let expect: Vec<usize> = full[..k].iter().map(|p| p.0).collect();
        assert_eq!(got.iter().map(|r| r.chunk_id).collect::<Vec<_>>(), expect);
        assert!(got.iter().enumerate().all(|(i, r)| r.rank == i + 1));
    }
}

#[test]
fn k_at_least_n_returns_everything_sorted() {
    let (vocab, store, _) = random_store(4, 3);
    let retriever = Retriever::new(vocab, 8, 5).unwrap();
    let index = EmbeddingIndex::build(&retriever, &store).unwrap();
    let got = search(&retriever, &index, "w1 w2", 10).unwrap();
    assert_eq!(got.len(), 3);
    assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
    let top = search(&retriever, &index, "w1 w2", 1).unwrap();
    assert_eq!(top[0], got[0]);
}

#[test]
fn identical_chunks_rank_lower_id_first() {
    let docs = vec![
        Document::new("a", "alpha beta"),
        Document::new("b", "alpha beta"),
        Document::new("a", "gamma"),
    ];
    let (store, _) = build_store(&docs, &WordLimits::uniform(10)).unwrap();
    let vocab = Vocabulary::build(["alpha beta gamma"], 100);
    let retriever = Retriever::new(vocab, 8, 1).unwrap();
    let index = EmbeddingIndex::build(&retriever, &store).unwrap();
    let got = search(&retriever, &index, "alpha beta", 3).unwrap();
    let pos0 = got.iter().position(|r| r.chunk_id == 0).unwrap();
    let pos1 = got.iter().position(|r| r.chunk_id == 1).unwrap();
    assert_eq!(pos0 + 1, pos1);
}

#[test]
fn empty_index_and_zero_k() {
    let vocab = Vocabulary::build(["a"], 10);
    let retriever = Retriever::new(vocab, 4, 1).unwrap();
    let store = ChunkStore::from_chunks(Vec::new(), 10).unwrap();
    let index = EmbeddingIndex::build(&retriever, &store).unwrap();
    assert!(matches!(search(&retriever, &index, "a", 1), Err(Error::EmptyIndex)));
    let (store, _) = build_store(&[Document::new("s", "a")], &WordLimits::uniform(10)).unwrap();
    let index = EmbeddingIndex::build(&retriever, &store).unwrap();
    assert!(search(&retriever, &index, "a", 0).is_err());
}

#[test]
fn fingerprint_changes_with_any_document_parameter() {
    let vocab = Vocabulary::build(["a b c"], 10);
    let retriever = Retriever::new(vocab, 4, 1).unwrap();
    let base = retriever.document.fingerprint();
    for i in 0..retriever.document.table.len() {
        let mut r = retriever.clone();
        r.document.table[i] = f32::from_bits(r.document.table[i].to_bits() ^ 1);
        assert_ne!(r.document.fingerprint(), base, "entry {i}");
    }
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(scores in prop::collection::vec(-30.0f64..30.0, 1..12), shift in -100.0f64..100.0) {
        let a = softmax_scores(&scores);
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let b = softmax_scores(&shifted);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn retrieval_distribution_examples() {
    let results = |s: &[f64]| -> Vec<RetrievalResult> {
        s.iter()
            .enumerate()
            .map(|(i, &score)| RetrievalResult {
                chunk_id: i,
                score,
                rank: i + 1,
            })
            .collect()
    };
    let p = retrieval_distribution(&results(&[1.0, 0.0]));
    assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);
    assert_eq!(retrieval_distribution(&results(&[3.0])), vec![1.0]);
}

/// Real LM whose candidate strings name token ids directly (`#17`), so that
/// every vocabulary entry, reserved ones included, can be a candidate.
struct IdLm<'a>(&'a LanguageModel);

impl PromptLm for IdLm<'_> {
    fn window(&self) -> usize {
        self.0.window()
    }
    fn prompt_len(&self, prompt: &str) -> usize {
        PromptLm::prompt_len(self.0, prompt)
    }
    fn answer_len(&self, _answer: &str) -> usize {
        1
    }
    fn answer_log_prob(&self, prompt: &str, answer: &str) -> ralab_core::Result<f64> {
        let id: u32 = answer.trim_start_matches('#').parse().unwrap();
        self.0.log_prob(&[id], &self.0.prompt_ids(prompt))
    }
    fn generate(&self, prompt: &str, max_new: usize) -> ralab_core::Result<Generation> {
        self.0.generate(prompt, max_new)
    }
    fn identity(&self) -> [u8; 32] {
        self.0.identity()
    }
}

fn perturbed_model(seed: u64) -> LanguageModel {
    let words: Vec<String> = (0..5).map(|i| format!("t{i}")).collect();
    let vocab = Vocabulary::build(words.iter().map(String::as_str), 100);
    let config = ModelConfig {
        vocab_size: 0,
        window: 48,
        width: 16,
        layers: 1,
        heads: 2,
        ffn: 16,
    };
    let mut model = LanguageModel::new(vocab, config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for p in &mut model.net.params {
        *p += rng.gen_range(-0.4..0.4);
    }
    model
}

fn chunks(texts: &[&str]) -> Vec<Chunk> {
    texts
        .iter()
        .enumerate()
        .map(|(id, t)| Chunk {
            id,
            source: "t".into(),
            text: t.to_string(),
            word_count: t.split_whitespace().count(),
        })
        .collect()
}

fn with_scores<'a>(chunks: &'a [Chunk], scores: &[f64]) -> Vec<Retrieved<'a>> {
    let w = softmax_scores(scores);
    chunks
        .iter()
        .zip(scores)
        .zip(w)
        .enumerate()
        .map(|(i, ((c, &score), weight))| Retrieved {
            chunk: c,
            score,
            rank: i + 1,
            weight,
        })
        .collect()
}

#[test]
fn mixture_over_exhaustive_candidates_sums_to_one() {
    let cs = chunks(&["t0 t1", "t2 t3 t4", "t4"]);
    for seed in 0..6u64 {
        let model = perturbed_model(seed);
        assert_eq!(model.vocab.len(), 10);
        let lm = IdLm(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 1 + (seed as usize % 3);
        let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let retrieved = with_scores(&cs[..k], &scores);
        let total: f64 = (0..10)
            .map(|id| mixture_log_prob(&lm, &format!("#{id}"), "t1 t2", &retrieved, &[]).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "k={k}: {total}");
    }
}

#[test]
fn single_chunk_mixture_matches_direct_scoring() {
    let model = perturbed_model(11);
    let cs = chunks(&["t0 t3"]);
    let retrieved = with_scores(&cs, &[0.7]);
    let mix = mixture_log_prob(&model, "t2 t4", "t1", &retrieved, &[]).unwrap();
    let direct = model.answer_log_prob("Background: t0 t3\n\nt1", "t2 t4").unwrap();
    assert!((mix - direct).abs() <= 1e-12);

    let gen = ensemble_generate(&model, "t1", &retrieved, &[], 4);
    let plain = model.generate("Background: t0 t3\n\nt1", 4).unwrap();
    match gen {
        Ok(r) => assert_eq!(r.winner_text(), plain.text.trim()),
        Err(e) => {
            assert!(matches!(e, Error::EmptyGeneration));
            assert!(plain.text.trim().is_empty());
        }
    }
}

#[test]
fn raising_the_weight_of_the_best_chunk_never_lowers_the_mixture() {
    let model = perturbed_model(21);
    let cs = chunks(&["t0 t1", "t2 t3", "t4 t0"]);
    let answer = "t3";
    let per_chunk: Vec<f64> = cs
        .iter()
        .map(|c| model.answer_log_prob(&format!("Background: {}\n\nt1", c.text), answer).unwrap())
        .collect();
    let best = (0..3).max_by(|&a, &b| per_chunk[a].total_cmp(&per_chunk[b])).unwrap();
    let mut scores = vec![0.0; 3];
    let mut last = f64::NEG_INFINITY;
    for step in 0..10 {
        scores[best] = step as f64 * 0.5;
        let mix = mixture_log_prob(&model, answer, "t1", &with_scores(&cs, &scores), &[]).unwrap();
        assert!(mix >= last - 1e-12);
        last = mix;
    }
}

#[test]
fn winners_survive_a_score_shift() {
    let model = perturbed_model(31);
    let cs = chunks(&["t0 t1", "t2 t3", "t4 t0"]);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..5 {
        let scores: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 17.25).collect();
        for scorer in Scorer::ALL {
            let a = ensemble_choice(&model, &["t0", "t2 t3", "t4"], "t1", &with_scores(&cs, &scores), &[], scorer).unwrap();
            let b = ensemble_choice(&model, &["t0", "t2 t3", "t4"], "t1", &with_scores(&cs, &shifted), &[], scorer).unwrap();
            assert_eq!(a.winner, b.winner);
        }
        let a = ensemble_generate(&model, "t1", &with_scores(&cs, &scores), &[], 3).map(|r| r.winner_text().to_string());
        let b = ensemble_generate(&model, "t1", &with_scores(&cs, &shifted), &[], 3).map(|r| r.winner_text().to_string());
        assert_eq!(a.ok(), b.ok());
    }
}
