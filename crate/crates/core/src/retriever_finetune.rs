//! LM-supervised retriever tuning.
//!
//! For every training example the top-k chunks are retrieved once with the
//! initial encoders and the LM scores `log p_LM(y | c ∘ x)` for each of them.
//! Those frozen scores define a target distribution over the k chunks, and
//! the query encoder is trained to minimize `KL(p_R ‖ p_LSR)` with the
//! document embeddings held fixed.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::binio::{put_str, put_u64, Reader};
use crate::corpus::ChunkStore;
use crate::error::{Error, Result};
use crate::fusion::build_augmented_prompt;
use crate::lm::vocab::pieces;
use crate::lm::{Adam, AdamConfig, PromptLm};
use crate::lm_finetune::{query_text, serialize, FTExample, Markers, MixtureSampler, MixtureSource, MixtureSpec, SourceKind};
use crate::retriever::{dot_checked, softmax_scores, EmbeddingIndex, RetrievalContext, Retriever};

pub const CORPUS_X_TOKENS: usize = 50;
pub const CORPUS_Y_TOKENS: usize = 50;
pub const CORPUS_MIN_TOKENS: usize = 100;
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_TAU: f64 = 0.01;
/// Floor applied to target probabilities inside the KL.
pub const PROB_FLOOR: f64 = 1e-12;
/// Outputs longer than this use the per-token normalization under `Auto`.
pub const AUTO_TOKEN_LIMIT: usize = 10;

const CACHE_MAGIC: &[u8; 4] = b"LSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Mti,
    Corpus,
}

/// One retriever training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LSRExample {
    /// Query-side text.
    pub x: String,
    /// Target output scored by the LM.
    pub y: String,
    /// LM-side prompt the background is prepended to.
    pub prompt: String,
    pub origin: Origin,
}

impl LSRExample {
    /// Example from a fine-tuning task: the query is the task's query
    /// template, the LM prompt its evaluation serialization.
    pub fn from_task(example: &FTExample) -> Result<Self> {
        let x = query_text(example).ok_or_else(|| Error::RetrievalRequired(example.category.to_string()))?;
        let s = serialize(example, None, Markers::EVAL)?;
        Ok(Self {
            x,
            y: s.output,
            prompt: s.prompt,
            origin: Origin::Mti,
        })
    }

    pub fn corpus(x: String, y: String) -> Self {
        Self {
            prompt: x.clone(),
            x,
            y,
            origin: Origin::Corpus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSample {
    pub examples: Vec<LSRExample>,
    /// Chunks shorter than the eligibility threshold.
    pub skipped: usize,
}

/// Seeded sample of chunks with at least 100 tokens, split into the first
/// 50 tokens as input and the last 50 as output.
pub fn make_corpus_examples(store: &ChunkStore, sample_size: usize, seed: u64) -> Result<CorpusSample> {
    if store.is_empty() {
        return Err(Error::EmptyInput("chunk store is empty".into()));
    }
    let mut eligible = Vec::new();
    let mut skipped = 0;
    for c in store.chunks() {
        let tokens = pieces(&c.text);
        if tokens.len() >= CORPUS_MIN_TOKENS {
            eligible.push(tokens);
        } else {
            skipped += 1;
        }
    }
    if eligible.is_empty() {
        return Err(Error::NoEligibleChunks(format!(
            "no chunk has {CORPUS_MIN_TOKENS} or more tokens ({skipped} skipped)"
        )));
    }
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(sample_size);
    let examples = order
        .into_iter()
        .map(|i| {
            let t = &eligible[i];
            LSRExample::corpus(t[..CORPUS_X_TOKENS].join(" "), t[t.len() - CORPUS_Y_TOKENS..].join(" "))
        })
        .collect();
    Ok(CorpusSample { examples, skipped })
}

/// Frozen supervision for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct LSRBatch {
    pub example_id: usize,
    pub example: LSRExample,
    pub chunk_ids: Vec<usize>,
    /// Retrieval scores with the initial encoders.
    pub scores: Vec<f64>,
    /// `log p_LM(y | c ∘ x)` per chunk.
    pub lm_log_probs: Vec<f64>,
    /// Length of `y` in LM tokens.
    pub y_tokens: usize,
}

impl LSRBatch {
    pub fn k(&self) -> usize {
        self.chunk_ids.len()
    }
}

/// Digest of everything the supervision depends on.
pub fn supervision_key<L: PromptLm + ?Sized>(examples: &[LSRExample], ctx: &RetrievalContext, lm: &L, k: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((k as u64).to_le_bytes());
    h.update(ctx.retriever.query.fingerprint());
    h.update(ctx.retriever.document.fingerprint());
    h.update(ctx.index.fingerprint());
    h.update(lm.identity());
    for t in ctx.retriever.vocab.tokens() {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    for c in ctx.store.chunks() {
        h.update((c.text.len() as u64).to_le_bytes());
        h.update(c.text.as_bytes());
    }
    for e in examples {
        for s in [&e.x, &e.y, &e.prompt] {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        }
        h.update([origin_byte(e.origin)]);
    }
    h.finalize().into()
}

fn origin_byte(o: Origin) -> u8 {
    match o {
        Origin::Mti => 0,
        Origin::Corpus => 1,
    }
}

/// Retrieves the top-k chunks for every example and scores each with the
/// LM. With a cache path, a cache written for the same inputs is returned
/// without touching the LM; otherwise the cache is (re)written.
pub fn precompute_supervision<L: PromptLm + ?Sized>(
    examples: &[LSRExample],
    ctx: &RetrievalContext,
    lm: &L,
    k: usize,
    cache: Option<&Path>,
) -> Result<Vec<LSRBatch>> {
    if k < 2 {
        return Err(Error::Config("supervision needs k of at least 2".into()));
    }
    let key = supervision_key(examples, ctx, lm, k);
    if let Some(path) = cache {
        if path.exists() {
            if let Ok((stored, batches)) = load_supervision(path) {
                if stored == key {
                    return Ok(batches);
                }
            }
        }
    }
    let mut batches = Vec::with_capacity(examples.len());
    for (example_id, e) in examples.iter().enumerate() {
        let y_tokens = lm.answer_len(&e.y);
        let hits = ctx.top_k(&e.x, k)?;
        let mut lm_log_probs = Vec::with_capacity(hits.len());
        for h in &hits {
            let p = build_augmented_prompt(lm, h.chunk.id, &h.chunk.text, &e.prompt, &[], y_tokens)?;
            let lp = lm.answer_log_prob(&p.text, &e.y)?;
            if !lp.is_finite() {
                return Err(Error::format("supervision", format!("non-finite LM score for example {example_id}")));
            }
            lm_log_probs.push(lp);
        }
        batches.push(LSRBatch {
            example_id,
            example: e.clone(),
            chunk_ids: hits.iter().map(|h| h.chunk.id).collect(),
            scores: hits.iter().map(|h| h.score).collect(),
            lm_log_probs,
            y_tokens,
        });
    }
    if let Some(path) = cache {
        save_supervision(path, &key, &batches)?;
    }
    Ok(batches)
}

/// Cache layout: `LSR1`, 32-byte input digest, u64 record count, then per
/// record u64 example id, u8 origin, x, y and prompt as u32-length-prefixed
/// UTF-8, u64 output token count, u64 k, k u64 chunk ids, k f64 retrieval
/// scores and k f64 LM log-likelihoods. All integers little-endian.
pub fn supervision_to_bytes(key: &[u8; 32], batches: &[LSRBatch]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(key);
    put_u64(&mut out, batches.len() as u64);
    for b in batches {
        put_u64(&mut out, b.example_id as u64);
        out.push(origin_byte(b.example.origin));
        put_str(&mut out, &b.example.x);
        put_str(&mut out, &b.example.y);
        put_str(&mut out, &b.example.prompt);
        put_u64(&mut out, b.y_tokens as u64);
        put_u64(&mut out, b.k() as u64);
        for &c in &b.chunk_ids {
            put_u64(&mut out, c as u64);
        }
        for v in b.scores.iter().chain(&b.lm_log_probs) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn supervision_from_bytes(buf: &[u8]) -> Result<([u8; 32], Vec<LSRBatch>)> {
    let mut r = Reader::new(buf, "supervision cache");
    r.magic(CACHE_MAGIC)?;
    let key: [u8; 32] = r.take(32)?.try_into().unwrap();
    let n = r.usize()?;
    let mut batches = Vec::new();
    for _ in 0..n {
        let example_id = r.usize()?;
        let origin = match r.u8()? {
            0 => Origin::Mti,
            1 => Origin::Corpus,
            b => return Err(Error::format("supervision cache", format!("unknown origin {b}"))),
        };
        let x = r.string()?;
        let y = r.string()?;
        let prompt = r.string()?;
        let y_tokens = r.usize()?;
        let k = r.usize()?;
        let chunk_ids = (0..k).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let scores = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let lm_log_probs = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if lm_log_probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("supervision cache", "non-finite LM score"));
        }
        batches.push(LSRBatch {
            example_id,
            example: LSRExample { x, y, prompt, origin },
            chunk_ids,
            scores,
            lm_log_probs,
            y_tokens,
        });
    }
    r.finish()?;
    Ok((key, batches))
}

pub fn save_supervision(path: &Path, key: &[u8; 32], batches: &[LSRBatch]) -> Result<()> {
    fs::write(path, supervision_to_bytes(key, batches))?;
    Ok(())
}

pub fn load_supervision(path: &Path) -> Result<([u8; 32], Vec<LSRBatch>)> {
    supervision_from_bytes(&fs::read(path)?)
}

/// How LM log-likelihoods become the quantity divided by the temperature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LsrNorm {
    /// `p_LM(y | c ∘ x)` itself.
    Sequence,
    /// Geometric mean per-token probability.
    PerToken,
    /// `PerToken` for outputs longer than 10 tokens, else `Sequence`.
    Auto,
}

impl FromStr for LsrNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequence" => Ok(LsrNorm::Sequence),
            "tok" | "token" => Ok(LsrNorm::PerToken),
            "auto" => Ok(LsrNorm::Auto),
            _ => Err(Error::Config(format!("unknown normalization {s:?} (seq, tok or auto)"))),
        }
    }
}

impl fmt::Display for LsrNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LsrNorm::Sequence => "seq",
            LsrNorm::PerToken => "tok",
            LsrNorm::Auto => "auto",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LSRTarget {
    pub probs: Vec<f64>,
    pub tau: f64,
}

/// `softmax(p / τ)` where `p` is the normalized LM probability of `y`.
pub fn lsr_distribution(lm_log_probs: &[f64], y_tokens: usize, tau: f64, norm: LsrNorm) -> Result<LSRTarget> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if lm_log_probs.is_empty() {
        return Err(Error::EmptyInput("no LM scores".into()));
    }
    let per_token = match norm {
        LsrNorm::Sequence => false,
        LsrNorm::PerToken => true,
        LsrNorm::Auto => y_tokens > AUTO_TOKEN_LIMIT,
    };
    let logits: Vec<f64> = lm_log_probs
        .iter()
        .map(|&lp| {
            let lp = if per_token { lp / y_tokens.max(1) as f64 } else { lp };
            lp.exp() / tau
        })
        .collect();
    Ok(LSRTarget {
        probs: softmax_scores(&logits),
        tau,
    })
}

/// KL divergence with the number of target entries that hit the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kl {
    pub value: f64,
    pub clamped: usize,
}

/// `Σ_c p_R(c) · log(p_R(c) / p_LSR(c))`, target entries floored at 1e-12.
pub fn kl_loss(p_r: &[f64], target: &[f64]) -> Result<Kl> {
    if p_r.len() != target.len() {
        return Err(Error::Dimension {
            expected: target.len(),
            actual: p_r.len(),
        });
    }
    let mut value = 0.0;
    let mut clamped = 0;
    for (&p, &t) in p_r.iter().zip(target) {
        if t < PROB_FLOOR {
            clamped += 1;
        }
        if p > 0.0 {
            value += p * (p.ln() - t.max(PROB_FLOOR).ln());
        }
    }
    Ok(Kl {
        value: value.max(0.0),
        clamped,
    })
}

/// Loss of one example as a function of its retrieval scores, and the
/// derivative with respect to each score.
fn kl_from_scores(scores: &[f64], target: &[f64]) -> Result<(Kl, Vec<f64>)> {
    let p = softmax_scores(scores);
    let kl = kl_loss(&p, target)?;
    let grad = p
        .iter()
        .zip(target)
        .map(|(&pj, &tj)| if pj > 0.0 { pj * (pj.ln() - tj.max(PROB_FLOOR).ln() - kl.value) } else { 0.0 })
        .collect();
    Ok((kl, grad))
}

/// Current retrieval scores of a batch's frozen chunks, in `f64` from the
/// pooled query and the index rows.
fn current_scores(retriever: &Retriever, index: &EmbeddingIndex, batch: &LSRBatch) -> Result<(Vec<u32>, Vec<f64>, Vec<f64>)> {
    let ids = retriever.vocab.encode(&batch.example.x);
    let q = retriever.query.pool(&ids)?;
    let scores = batch
        .chunk_ids
        .iter()
        .map(|&c| {
            if c >= index.len() {
                return Err(Error::format("supervision", format!("chunk {c} outside the index")));
            }
            Ok(q.iter().zip(index.row(c)).map(|(a, &b)| a * b as f64).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((ids, q, scores))
}

/// KL of one example under the current query encoder.
pub fn example_loss(retriever: &Retriever, index: &EmbeddingIndex, batch: &LSRBatch, target: &LSRTarget) -> Result<Kl> {
    let (_, _, scores) = current_scores(retriever, index, batch)?;
    Ok(kl_from_scores(&scores, &target.probs)?.0)
}

/// KL of one example and its gradient, `scale`d and accumulated into `grad`
/// over the query table.
pub fn example_gradient(
    retriever: &Retriever,
    index: &EmbeddingIndex,
    batch: &LSRBatch,
    target: &LSRTarget,
    scale: f64,
    grad: &mut [f64],
) -> Result<Kl> {
    let d = retriever.query.dim;
    let (ids, _, scores) = current_scores(retriever, index, batch)?;
    let (kl, g_scores) = kl_from_scores(&scores, &target.probs)?;
    let mut g_q = vec![0f64; d];
    for (&c, &g) in batch.chunk_ids.iter().zip(&g_scores) {
        for (acc, &r) in g_q.iter_mut().zip(index.row(c)) {
            *acc += g * r as f64;
        }
    }
    let w = scale / ids.len() as f64;
    for &id in &ids {
        let row = &mut grad[id as usize * d..(id as usize + 1) * d];
        for (gr, gq) in row.iter_mut().zip(&g_q) {
            *gr += w * gq;
        }
    }
    Ok(kl)
}

pub fn targets(batches: &[LSRBatch], tau: f64, norm: LsrNorm) -> Result<Vec<LSRTarget>> {
    batches
        .iter()
        .map(|b| lsr_distribution(&b.lm_log_probs, b.y_tokens, tau, norm))
        .collect()
}

pub fn mean_kl(retriever: &Retriever, index: &EmbeddingIndex, batches: &[LSRBatch], targets: &[LSRTarget]) -> Result<f64> {
    if batches.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (b, t) in batches.iter().zip(targets) {
        total += example_loss(retriever, index, b, t)?.value;
    }
    Ok(total / batches.len() as f64)
}

/// Mean reciprocal rank, over the whole index, of the chunk the LM scored
/// highest for each example (earliest on ties).
pub fn mean_reciprocal_rank(retriever: &Retriever, index: &EmbeddingIndex, batches: &[LSRBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for b in batches {
        let best = (0..b.k()).fold(0, |best, j| if b.lm_log_probs[j] > b.lm_log_probs[best] { j } else { best });
        let relevant = b.chunk_ids[best];
        let q = retriever.encode_query(&b.example.x)?;
        let s_rel = dot_checked(q.values(), index.row(relevant))?;
        let mut rank = 1;
        for i in 0..index.len() {
            let s = dot_checked(q.values(), index.row(i))?;
            if s > s_rel || (s == s_rel && i < relevant) {
                rank += 1;
            }
        }
        total += 1.0 / rank as f64;
    }
    Ok(total / batches.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsrConfig {
    pub steps: usize,
    /// Examples per update.
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub norm: LsrNorm,
    pub corpus_fraction: f64,
    pub mti_fraction: f64,
    /// Held-out MRR period; 0 evaluates only before and after training.
    pub eval_every: usize,
    /// Return the query encoder with the best held-out MRR.
    pub keep_best: bool,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for LsrConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            lr: 1e-5,
            tau: DEFAULT_TAU,
            norm: LsrNorm::Auto,
            corpus_fraction: 0.95,
            mti_fraction: 0.05,
            eval_every: 0,
            keep_best: true,
            seed: 0,
            adam: AdamConfig {
                clip: None,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LsrLog {
    /// Mean KL of the examples drawn at each step, before the update.
    pub kl: Vec<f64>,
    /// `(step, held-out MRR)`.
    pub mrr: Vec<(usize, f64)>,
    pub best_step: usize,
    /// Target entries floored inside the KL.
    pub clamped: usize,
}

/// Trains the query encoder on frozen supervision. The document encoder must
/// be frozen and is checked to be untouched afterwards.
pub fn lsr_train(
    mut retriever: Retriever,
    index: &EmbeddingIndex,
    train: &[LSRBatch],
    heldout: &[LSRBatch],
    config: &LsrConfig,
) -> Result<(Retriever, LsrLog)> {
    if retriever.document.trainable {
        return Err(Error::ContractViolation("the document encoder must be frozen during retriever tuning".into()));
    }
    if !retriever.query.trainable {
        return Err(Error::ContractViolation("the query encoder is frozen".into()));
    }
    if index.fingerprint() != &retriever.document.fingerprint() {
        return Err(Error::StaleIndex);
    }
    if train.is_empty() {
        return Err(Error::EmptyInput("no supervision batches".into()));
    }
    let doc_before = retriever.document.table.clone();
    let train_targets = targets(train, config.tau, config.norm)?;

    let groups: Vec<(&str, f64, Vec<usize>)> = [
        ("corpus", config.corpus_fraction, Origin::Corpus),
        ("mti", config.mti_fraction, Origin::Mti),
    ]
    .into_iter()
    .map(|(name, w, origin)| {
        let members = (0..train.len()).filter(|&i| train[i].example.origin == origin).collect();
        (name, w, members)
    })
    .filter(|g: &(&str, f64, Vec<usize>)| !g.2.is_empty())
    .collect();
    let sources: Vec<MixtureSource> = groups
        .iter()
        .map(|(name, _, m)| MixtureSource {
            name: name.to_string(),
            kind: SourceKind::Task,
            size: m.len(),
        })
        .collect();
    let spec = MixtureSpec {
        weights: groups.iter().map(|(name, w, _)| (name.to_string(), *w)).collect(),
        cap: usize::MAX,
        ..MixtureSpec::default()
    };
    let mut sampler = MixtureSampler::new(&sources, &spec, config.seed)?;

    let mut log = LsrLog::default();
    let mut opt = Adam::new(retriever.query.table.len(), config.adam);
    let evaluate = |r: &Retriever| mean_reciprocal_rank(r, index, heldout);
    let mut best = if heldout.is_empty() {
        None
    } else {
        let m = evaluate(&retriever)?;
        log.mrr.push((0, m));
        Some((m, 0, retriever.query.table.clone()))
    };
    for step in 0..config.steps {
        let mut grad = vec![0f64; retriever.query.table.len()];
        let scale = 1.0 / config.batch_size.max(1) as f64;
        let mut total = 0.0;
        for _ in 0..config.batch_size.max(1) {
            let (g, i) = sampler.next().expect("endless sampler");
            let b = groups[g].2[i];
            let kl = example_gradient(&retriever, index, &train[b], &train_targets[b], scale, &mut grad)?;
            total += kl.value * scale;
            log.clamped += kl.clamped;
        }
        log.kl.push(total);
        opt.update(&mut retriever.query.table, &grad, config.lr);
        let done = step + 1;
        let due = (config.eval_every > 0 && done % config.eval_every == 0) || done == config.steps;
        if due && !heldout.is_empty() {
            let m = evaluate(&retriever)?;
            log.mrr.push((done, m));
            if let Some(b) = &mut best {
                if m > b.0 {
                    *b = (m, done, retriever.query.table.clone());
                }
            }
        }
    }
    log.best_step = config.steps;
    if config.keep_best {
        if let Some((_, step, table)) = best {
            log.best_step = step;
            retriever.query.table = table;
        }
    }
    if retriever.document.table != doc_before {
        return Err(Error::ContractViolation("document encoder changed during retriever tuning".into()));
    }
    Ok((retriever, log))
}
