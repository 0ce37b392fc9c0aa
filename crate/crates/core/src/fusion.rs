//! Parallel in-context retrieval augmentation.
//!
//! Every retrieved chunk is prepended to the prompt on its own, the LM scores
//! each augmented prompt independently, and the per-chunk probabilities are
//! mixed with the retrieval weights:
//! `p(y | x) = Σ_c p_LM(y | c ∘ x) · p_R(c | x)`.

use crate::error::{Error, Result};
use crate::lm::{log_sum_exp, PromptLm, Scorer, COMPLETION_CONTEXT};
use crate::retriever::Retrieved;
use crate::text::words;

pub const BACKGROUND_START: &str = "Background: ";
pub const BACKGROUND_END: &str = "\n\n";
/// Separator placed after each few-shot block.
pub const BLOCK_END: &str = "\n\n";

/// What had to be removed to fit the context window.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TruncationReport {
    /// 0-based positions of few-shot blocks that were dropped.
    pub dropped_blocks: Vec<usize>,
    /// Words cut from the end of the background chunk.
    pub chunk_words_dropped: usize,
}

impl TruncationReport {
    pub fn is_empty(&self) -> bool {
        self.dropped_blocks.is_empty() && self.chunk_words_dropped == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPrompt {
    pub chunk_id: usize,
    pub text: String,
    pub report: TruncationReport,
}

fn assemble(background: Option<&str>, blocks: &[&str], prompt: &str) -> String {
    let mut out = String::new();
    for b in blocks {
        out.push_str(b);
        out.push_str(BLOCK_END);
    }
    if let Some(bg) = background {
        out.push_str(BACKGROUND_START);
        out.push_str(bg);
        out.push_str(BACKGROUND_END);
    }
    out.push_str(prompt);
    out
}

fn fits<L: PromptLm + ?Sized>(lm: &L, text: &str, reserve: usize) -> bool {
    lm.prompt_len(text) + reserve <= lm.window()
}

/// Drops few-shot blocks oldest-first until the text fits. Returns the kept
/// blocks, or `None` if even zero blocks overflow.
fn fit_blocks<'b, L: PromptLm + ?Sized>(
    lm: &L,
    background: Option<&str>,
    blocks: &[&'b str],
    prompt: &str,
    reserve: usize,
    report: &mut TruncationReport,
) -> Option<Vec<&'b str>> {
    for start in 0..=blocks.len() {
        if fits(lm, &assemble(background, &blocks[start..], prompt), reserve) {
            report.dropped_blocks = (0..start).collect();
            return Some(blocks[start..].to_vec());
        }
    }
    None
}

fn overflow<L: PromptLm + ?Sized>(lm: &L, text: &str, reserve: usize) -> Error {
    Error::ContextOverflow {
        needed: lm.prompt_len(text) + reserve,
        window: lm.window(),
    }
}

/// `"{blocks}Background: {chunk}\n\n{prompt}"`, where each few-shot block is
/// followed by a blank line. Truncated so that the prompt plus `reserve`
/// answer tokens fit the window: few-shot blocks go first (oldest-first),
/// then the tail of the chunk. The prompt itself is never cut.
pub fn build_augmented_prompt<L: PromptLm + ?Sized>(
    lm: &L,
    chunk_id: usize,
    chunk_text: &str,
    prompt: &str,
    fewshot: &[&str],
    reserve: usize,
) -> Result<AugmentedPrompt> {
    if prompt.trim().is_empty() {
        return Err(Error::EmptyInput("prompt is empty".into()));
    }
    let mut report = TruncationReport::default();
    if let Some(kept) = fit_blocks(lm, Some(chunk_text), fewshot, prompt, reserve, &mut report) {
        return Ok(AugmentedPrompt {
            chunk_id,
            text: assemble(Some(chunk_text), &kept, prompt),
            report,
        });
    }
    report.dropped_blocks = (0..fewshot.len()).collect();
    let chunk_words: Vec<&str> = words(chunk_text).collect();
    let with = |n: usize| assemble(Some(&chunk_words[..n].join(" ")), &[], prompt);
    if !fits(lm, &with(0), reserve) {
        return Err(overflow(lm, &with(0), reserve));
    }
    // Largest prefix of the chunk that fits; length is monotone in words kept.
    let (mut lo, mut hi) = (0, chunk_words.len());
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if fits(lm, &with(mid), reserve) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    report.chunk_words_dropped = chunk_words.len() - lo;
    Ok(AugmentedPrompt {
        chunk_id,
        text: with(lo),
        report,
    })
}

/// Prompt without background, dropping few-shot blocks oldest-first.
pub fn build_plain_prompt<L: PromptLm + ?Sized>(
    lm: &L,
    prompt: &str,
    fewshot: &[&str],
    reserve: usize,
) -> Result<(String, TruncationReport)> {
    if prompt.trim().is_empty() {
        return Err(Error::EmptyInput("prompt is empty".into()));
    }
    let mut report = TruncationReport::default();
    match fit_blocks(lm, None, fewshot, prompt, reserve, &mut report) {
        Some(kept) => Ok((assemble(None, &kept, prompt), report)),
        None => Err(overflow(lm, prompt, reserve)),
    }
}

/// `log Σ_i w_i · exp(log_probs_i)`. Zero-weight terms contribute nothing.
pub fn mix_log_probs(weights: &[f64], log_probs: &[f64]) -> f64 {
    let terms: Vec<f64> = weights
        .iter()
        .zip(log_probs)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, lp)| lp + w.ln())
        .collect();
    if terms.is_empty() {
        f64::NEG_INFINITY
    } else {
        log_sum_exp(&terms)
    }
}

fn weights(retrieved: &[Retrieved]) -> Result<Vec<f64>> {
    if retrieved.is_empty() {
        return Err(Error::EmptyInput("no retrieved chunks".into()));
    }
    Ok(retrieved.iter().map(|r| r.weight).collect())
}

fn augmented<L: PromptLm + ?Sized>(
    lm: &L,
    prompt: &str,
    retrieved: &[Retrieved],
    fewshot: &[&str],
    reserve: usize,
) -> Result<Vec<AugmentedPrompt>> {
    retrieved
        .iter()
        .map(|r| build_augmented_prompt(lm, r.chunk.id, &r.chunk.text, prompt, fewshot, reserve))
        .collect()
}

/// Mixture log-probability of `answer` over the retrieved chunks.
pub fn mixture_log_prob<L: PromptLm + ?Sized>(
    lm: &L,
    answer: &str,
    prompt: &str,
    retrieved: &[Retrieved],
    fewshot: &[&str],
) -> Result<f64> {
    let w = weights(retrieved)?;
    let reserve = lm.answer_len(answer);
    let lps = augmented(lm, prompt, retrieved, fewshot, reserve)?
        .iter()
        .map(|p| lm.answer_log_prob(&p.text, answer))
        .collect::<Result<Vec<_>>>()?;
    Ok(mix_log_probs(&w, &lps))
}

/// One retrieved chunk's part in an ensemble decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkContribution {
    pub chunk_id: usize,
    pub weight: f64,
    /// Candidate this entry refers to: the overall winner for choice tasks,
    /// the chunk's own decoded answer for generation.
    pub candidate: usize,
    /// `log p_LM(candidate | c ∘ x)`.
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub text: String,
    /// Log of the mixture probability.
    pub log_prob: f64,
    /// Scorer value (lower is better) for choice tasks; negated mixture
    /// log-probability for generation.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureResult {
    pub per_chunk: Vec<ChunkContribution>,
    pub candidates: Vec<CandidateScore>,
    pub winner: usize,
}

impl MixtureResult {
    pub fn winner_text(&self) -> &str {
        &self.candidates[self.winner].text
    }

    pub fn winner_score(&self) -> f64 {
        self.candidates[self.winner].score
    }
}

/// Index of the smallest score, earliest on ties.
fn argmin(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        if best.map_or(true, |(_, b)| s < b) {
            best = Some((i, s));
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Scores each choice by the scorer applied to its mixture log-probability.
/// The `nll_compl` reference `p(choice | "Answer:")` uses no retrieval.
pub fn ensemble_choice<L: PromptLm + ?Sized>(
    lm: &L,
    choices: &[&str],
    prompt: &str,
    retrieved: &[Retrieved],
    fewshot: &[&str],
    scorer: Scorer,
) -> Result<MixtureResult> {
    if choices.len() < 2 {
        return Err(Error::InvalidAnswer("at least two choices are required".into()));
    }
    let w = weights(retrieved)?;
    // per_choice[j][i] = log p(choice j | chunk i ∘ x)
    let mut per_choice = Vec::with_capacity(choices.len());
    let mut candidates = Vec::with_capacity(choices.len());
    for choice in choices {
        if choice.trim().is_empty() {
            return Err(Error::InvalidAnswer("empty choice".into()));
        }
        let reserve = lm.answer_len(choice);
        let lps = augmented(lm, prompt, retrieved, fewshot, reserve)?
            .iter()
            .map(|p| lm.answer_log_prob(&p.text, choice))
            .collect::<Result<Vec<_>>>()?;
        let log_prob = mix_log_probs(&w, &lps);
        let score = scorer.apply(log_prob, reserve, choice.trim().chars().count(), || {
            lm.answer_log_prob(COMPLETION_CONTEXT, choice)
        })?;
        per_choice.push(lps);
        candidates.push(CandidateScore {
            text: choice.to_string(),
            log_prob,
            score,
        });
    }
    let winner = argmin(candidates.iter().map(|c| c.score));
    let per_chunk = retrieved
        .iter()
        .enumerate()
        .map(|(i, r)| ChunkContribution {
            chunk_id: r.chunk.id,
            weight: r.weight,
            candidate: winner,
            log_prob: per_choice[winner][i],
        })
        .collect();
    Ok(MixtureResult {
        per_chunk,
        candidates,
        winner,
    })
}

/// Decodes greedily under each chunk, groups identical trimmed answers and
/// returns the group with the largest `Σ p_R(c|x) · p(answer | c ∘ x)`.
/// Ties go to the group holding the best-ranked chunk.
pub fn ensemble_generate<L: PromptLm + ?Sized>(
    lm: &L,
    prompt: &str,
    retrieved: &[Retrieved],
    fewshot: &[&str],
    max_new_tokens: usize,
) -> Result<MixtureResult> {
    weights(retrieved)?;
    let mut order: Vec<&Retrieved> = retrieved.iter().collect();
    order.sort_by_key(|r| r.rank);
    let prompts = order
        .iter()
        .map(|r| build_augmented_prompt(lm, r.chunk.id, &r.chunk.text, prompt, fewshot, max_new_tokens))
        .collect::<Result<Vec<_>>>()?;

    let mut groups: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut per_chunk = Vec::new();
    for (r, p) in order.iter().zip(&prompts) {
        let gen = lm.generate(&p.text, max_new_tokens)?;
        let answer = gen.text.trim();
        if answer.is_empty() {
            continue;
        }
        let g = match groups.iter().position(|(t, _, _)| t == answer) {
            Some(g) => g,
            None => {
                groups.push((answer.to_string(), Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        groups[g].1.push(r.weight);
        groups[g].2.push(gen.log_prob);
        per_chunk.push(ChunkContribution {
            chunk_id: r.chunk.id,
            weight: r.weight,
            candidate: g,
            log_prob: gen.log_prob,
        });
    }
    if groups.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    let candidates: Vec<CandidateScore> = groups
        .into_iter()
        .map(|(text, w, lp)| {
            let log_prob = mix_log_probs(&w, &lp);
            CandidateScore {
                text,
                log_prob,
                score: -log_prob,
            }
        })
        .collect();
    let winner = argmin(candidates.iter().map(|c| c.score));
    Ok(MixtureResult {
        per_chunk,
        candidates,
        winner,
    })
}

/// Scorer-based choice without retrieval.
pub fn plain_choice<L: PromptLm + ?Sized>(lm: &L, choices: &[&str], prompt: &str, scorer: Scorer) -> Result<MixtureResult> {
    if choices.len() < 2 {
        return Err(Error::InvalidAnswer("at least two choices are required".into()));
    }
    let mut candidates = Vec::with_capacity(choices.len());
    for choice in choices {
        if choice.trim().is_empty() {
            return Err(Error::InvalidAnswer("empty choice".into()));
        }
        let log_prob = lm.answer_log_prob(prompt, choice)?;
        let score = scorer.apply(log_prob, lm.answer_len(choice), choice.trim().chars().count(), || {
            lm.answer_log_prob(COMPLETION_CONTEXT, choice)
        })?;
        candidates.push(CandidateScore {
            text: choice.to_string(),
            log_prob,
            score,
        });
    }
    let winner = argmin(candidates.iter().map(|c| c.score));
    Ok(MixtureResult {
        per_chunk: Vec::new(),
        candidates,
        winner,
    })
}
