use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ralab_core::fusion::ensemble_generate;
use ralab_core::harness::experiment::{build_vocabulary, PROMPT_WORDS};
use ralab_core::harness::synth::{generate_synthetic_kb, SynthConfig};
use ralab_core::lm::{AdamConfig, Adam, LanguageModel, ModelConfig};
use ralab_core::lm_finetune::{pack, text_instances};
use ralab_core::retriever::{search, EmbeddingIndex, RetrievalContext, Retriever};
use ralab_core::retriever_finetune::{example_gradient, precompute_supervision, targets, LSRExample, LsrNorm};

fn setup() -> (ralab_core::harness::synth::SyntheticKb, Retriever, EmbeddingIndex, LanguageModel) {
    let kb = generate_synthetic_kb(&SynthConfig::default(), 0).unwrap();
    let vocab = build_vocabulary(&kb);
    assert!(vocab.count_tokens(PROMPT_WORDS) > 0);
    let r = Retriever::new(vocab.clone(), 64, 0).unwrap();
    let index = EmbeddingIndex::build(&r, &kb.store).unwrap();
    let lm = LanguageModel::new(vocab, ModelConfig::small(0), 0).unwrap();
    (kb, r, index, lm)
}

fn benches(c: &mut Criterion) {
    let (kb, r, index, mut lm) = setup();
    let question = kb.questions[0].clone();

    c.bench_function("search_top10_1200_chunks", |b| {
        b.iter(|| search(&r, &index, black_box(&question), 10).unwrap())
    });

    let lines: Vec<&String> = kb.pretrain.iter().take(64).collect();
    let instances: Vec<_> = lines
        .iter()
        .enumerate()
        .flat_map(|(i, l)| text_instances(&lm.vocab, l, i, lm.window()).unwrap())
        .collect();
    let refs: Vec<_> = instances.iter().take(16).collect();
    let mut rng = rand_seed();
    let batch = pack(&refs, lm.window(), &mut rng).unwrap();
    let mut opt = Adam::new(lm.net.num_params(), AdamConfig::default());
    c.bench_function("lm_train_step_16", |b| b.iter(|| lm.train_step(black_box(&batch), &mut opt, 1e-3).unwrap()));

    let ctx = RetrievalContext::new(&r, &index, &kb.store).unwrap();
    let hits = ctx.top_k(&question, 10).unwrap();
    let prompt = format!("Q: {question}\nA:");
    c.bench_function("ensemble_generate_k10", |b| {
        b.iter(|| ensemble_generate(&lm, black_box(&prompt), &hits, &[], 4).unwrap())
    });

    let examples: Vec<LSRExample> = kb
        .task_examples(ralab_core::harness::synth::Split::Train)
        .iter()
        .take(8)
        .map(|e| LSRExample::from_task(e).unwrap())
        .collect();
    let batches = precompute_supervision(&examples, &ctx, &lm, 10, None).unwrap();
    let tg = targets(&batches, 0.01, LsrNorm::Auto).unwrap();
    c.bench_function("lsr_gradient_8", |b| {
        b.iter(|| {
            let mut grad = vec![0f64; r.query.table.len()];
            for (batch, t) in batches.iter().zip(&tg) {
                example_gradient(&r, &index, batch, t, 0.125, &mut grad).unwrap();
            }
            grad
        })
    });
}

fn rand_seed() -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);
