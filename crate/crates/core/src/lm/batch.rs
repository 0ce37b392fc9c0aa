//! Packed training sequences with block-diagonal causal attention.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::lm::vocab::{BOS, EOS};

/// One row of a training batch: several examples laid end to end, each
/// wrapped in BOS/EOS, with attention and position ids confined to the
/// example a token belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    /// Index of the first token of the example each position belongs to.
    pub seg: Vec<usize>,
    /// Positions whose token is a prediction target (loss support).
    pub targets: Vec<bool>,
    /// Token range `BOS..=EOS` of every packed example.
    pub examples: Vec<Range<usize>>,
}

impl PackedSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Length an example of `n` tokens occupies once wrapped in BOS/EOS.
    pub fn wrapped_len(n: usize) -> usize {
        n + 2
    }

    /// Append `ids` as a new example. `labels[i]` marks output-segment
    /// tokens; the closing EOS is a target whenever any label is set, so the
    /// model learns where outputs end.
    pub fn push_example(&mut self, ids: &[u32], labels: &[bool]) -> Result<()> {
        if ids.len() != labels.len() {
            return Err(Error::Mask(format!(
                "label mask has {} entries for {} tokens",
                labels.len(),
                ids.len()
            )));
        }
        let start = self.tokens.len();
        self.tokens.push(BOS);
        self.targets.push(false);
        self.tokens.extend_from_slice(ids);
        self.targets.extend_from_slice(labels);
        self.tokens.push(EOS);
        self.targets.push(labels.iter().any(|&b| b));
        let end = self.tokens.len();
        self.seg.resize(end, start);
        self.examples.push(start..end);
        Ok(())
    }

    /// Whether position `t` may attend to position `j`.
    pub fn attends(&self, t: usize, j: usize) -> bool {
        j <= t && self.seg[t] == self.seg[j]
    }

    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|&&b| b).count()
    }

    pub fn validate(&self, window: usize) -> Result<()> {
        let n = self.tokens.len();
        if self.seg.len() != n || self.targets.len() != n {
            return Err(Error::Mask("sequence fields have different lengths".into()));
        }
        if n > window {
            return Err(Error::ContextOverflow { needed: n, window });
        }
        for r in &self.examples {
            if self.tokens[r.start] != BOS || self.tokens[r.end - 1] != EOS || self.targets[r.start] {
                return Err(Error::Mask(format!("example {r:?} is not BOS..EOS delimited")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackedBatch {
    pub sequences: Vec<PackedSequence>,
}

impl PackedBatch {
    pub fn num_targets(&self) -> usize {
        self.sequences.iter().map(PackedSequence::num_targets).sum()
    }
}
