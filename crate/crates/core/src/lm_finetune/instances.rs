use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::lm::vocab::NEWLINE;
use crate::lm::{PackedBatch, PackedSequence, TokenSequence, Vocabulary};
use crate::lm_finetune::serialize::{query_text, serialize, Markers};
use crate::lm_finetune::{Category, FTExample};
use crate::retriever::RetrievalContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Retrieval-augmented instruction tuning.
    RaIt,
    /// Plain instruction tuning: one instance per example, no retrieval.
    It,
}

/// What fills the background field of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Background {
    None,
    Given,
    Chunk(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FTInstance {
    pub example: usize,
    pub background: Background,
    /// Tokens without BOS/EOS.
    pub ids: Vec<u32>,
    /// True exactly on output-segment tokens.
    pub labels: Vec<bool>,
}

impl FTInstance {
    pub fn sequence(&self) -> TokenSequence {
        TokenSequence::with_mask(self.ids.clone(), self.labels.clone()).expect("labels align with ids")
    }

    pub fn wrapped_len(&self) -> usize {
        PackedSequence::wrapped_len(self.ids.len())
    }
}

/// Tokenizes one serialized instance, cutting the tail of the background if
/// the whole does not fit `window` once wrapped in BOS/EOS.
fn build(
    vocab: &Vocabulary,
    example: &FTExample,
    example_id: usize,
    background: Background,
    text: Option<&str>,
    markers: Markers,
    window: usize,
) -> Result<FTInstance> {
    let s = serialize(example, None, markers)?;
    let body = vocab.encode(&s.prompt);
    let output = vocab.encode(&s.output);
    let budget = window.saturating_sub(2);
    let overflow = |needed: usize| Error::ContextOverflow { needed, window };
    let mut ids = Vec::new();
    if let Some(bg) = text {
        let bg_ids = vocab.encode(bg);
        let fixed = 3 + body.len() + output.len();
        if fixed > budget {
            return Err(overflow(fixed + 2));
        }
        let keep = bg_ids.len().min(budget - fixed);
        ids.push(vocab.id("Background:"));
        ids.extend_from_slice(&bg_ids[..keep]);
        let nl = vocab.id(NEWLINE);
        ids.extend([nl, nl]);
    } else if body.len() + output.len() > budget {
        return Err(overflow(body.len() + output.len() + 2));
    }
    ids.extend(body);
    let mut labels = vec![false; ids.len()];
    labels.resize(ids.len() + output.len(), true);
    ids.extend(output);
    Ok(FTInstance {
        example: example_id,
        background,
        ids,
        labels,
    })
}

/// Fine-tuning instances for one example.
///
/// Retrieval-augmented mode gives `k_tilde` instances with the top retrieved
/// chunks as background, except that summarization and context-dependent
/// reading comprehension get a single instance with the given context, and
/// self-contained reading comprehension gets the given context plus
/// `k_tilde` retrieved chunks. Plain mode gives one instance, with the given
/// context when the category has one.
#[allow(clippy::too_many_arguments)]
pub fn make_instances(
    example: &FTExample,
    example_id: usize,
    vocab: &Vocabulary,
    retrieval: Option<&RetrievalContext>,
    k_tilde: usize,
    mode: Mode,
    window: usize,
    rng: &mut impl Rng,
) -> Result<Vec<FTInstance>> {
    example.validate()?;
    if k_tilde == 0 {
        return Err(Error::Config("k_tilde must be at least 1".into()));
    }
    let given = example.context.as_deref();
    let mut plan: Vec<(Background, Option<String>)> = Vec::new();
    let use_given = example.category.needs_context();
    if use_given {
        plan.push((Background::Given, given.map(str::to_string)));
    }
    let wants_retrieval = mode == Mode::RaIt
        && match example.category {
            Category::Summarization => false,
            Category::ReadingComprehension => example.self_contained,
            _ => true,
        };
    if wants_retrieval {
        let missing = || Error::RetrievalRequired(example.category.to_string());
        let ctx = retrieval.ok_or_else(missing)?;
        let query = query_text(example).ok_or_else(missing)?;
        for r in ctx.top_k(&query, k_tilde)? {
            plan.push((Background::Chunk(r.chunk.id), Some(r.chunk.text.clone())));
        }
    } else if !use_given {
        plan.push((Background::None, None));
    }
    plan.into_iter()
        .map(|(bg, text)| {
            let markers = Markers::sample(rng);
            build(vocab, example, example_id, bg, text.as_deref(), markers, window)
        })
        .collect()
}

/// Plain-text completion instances covering `text`, split so each fits the
/// window. Every token is a target.
pub fn text_instances(vocab: &Vocabulary, text: &str, example_id: usize, window: usize) -> Result<Vec<FTInstance>> {
    let budget = window.saturating_sub(2);
    if budget == 0 {
        return Err(Error::ContextOverflow { needed: 3, window });
    }
    Ok(vocab
        .encode(text)
        .chunks(budget)
        .map(|ids| FTInstance {
            example: example_id,
            background: Background::None,
            ids: ids.to_vec(),
            labels: vec![true; ids.len()],
        })
        .collect())
}

/// Shuffles the instances and packs them first-fit into sequences of at most
/// `window` tokens.
pub fn pack(instances: &[&FTInstance], window: usize, rng: &mut impl Rng) -> Result<PackedBatch> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(rng);
    let mut sequences: Vec<PackedSequence> = Vec::new();
    for i in order {
        let inst = instances[i];
        let need = inst.wrapped_len();
        if need > window {
            return Err(Error::ContextOverflow { needed: need, window });
        }
        let slot = match sequences.iter().position(|s| s.len() + need <= window) {
            Some(j) => j,
            None => {
                sequences.push(PackedSequence::new());
                sequences.len() - 1
            }
        };
        sequences[slot].push_example(&inst.ids, &inst.labels)?;
    }
    Ok(PackedBatch { sequences })
}
