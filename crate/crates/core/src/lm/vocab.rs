//! Word-level tokenizer with reserved special ids.
//!
//! Tokens are maximal runs of non-whitespace characters; every newline is
//! kept as its own `"\n"` token so prompt layouts survive tokenization.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const NEWLINE: &str = "\n";
pub const DEFAULT_VOCAB_CAP: usize = 8192;

/// Split text into token strings.
pub fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(&text[s..i]);
            }
            if ch == '\n' {
                out.push(NEWLINE);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// Token ids plus an optional per-position label mask.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub label_mask: Option<Vec<bool>>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids, label_mask: None }
    }

    pub fn with_mask(ids: Vec<u32>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::Mask(format!(
                "label mask has {} entries for {} tokens",
                mask.len(),
                ids.len()
            )));
        }
        Ok(Self {
            ids,
            label_mask: Some(mask),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from training text: tokens ordered by descending frequency, then
    /// lexicographically, truncated so the total size is at most `cap`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for p in pieces(text) {
                *counts.entry(p).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t) && *t != NEWLINE)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = cap.saturating_sub(RESERVED.len() + 1);
        let tokens = RESERVED
            .iter()
            .copied()
            .chain(std::iter::once(NEWLINE))
            .chain(ranked.into_iter().take(room).map(|(t, _)| t))
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    /// Rebuild from an ordered token list whose first entries are the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::format("vocabulary", "reserved tokens missing or out of order"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(RESERVED[UNK as usize])
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pieces(text).into_iter().map(|p| self.id(p)).collect()
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        TokenSequence::new(self.encode(text))
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        pieces(text).len()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id);
            if tok == NEWLINE {
                out.push('\n');
                continue;
            }
            if !out.is_empty() && !out.ends_with('\n') {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["the cat sat\non the mat", "the dog"], DEFAULT_VOCAB_CAP)
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = vocab();
        for (i, t) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(t), i as u32);
        }
        assert_eq!((PAD, BOS, EOS, UNK), (0, 1, 2, 3));
    }

    #[test]
    fn empty_text_round_trips() {
        let v = vocab();
        let seq = v.tokenize("");
        assert!(seq.is_empty());
        assert_eq!(v.detokenize(&seq.ids), "");
    }

    #[test]
    fn known_words_round_trip() {
        let v = vocab();
        let seq = v.tokenize("the cat");
        assert_eq!(seq.len(), 2);
        assert_eq!(v.detokenize(&seq.ids), "the cat");
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = vocab();
        let seq = v.tokenize("the zebra");
        assert_eq!(seq.ids[1], UNK);
        assert_eq!(v.detokenize(&seq.ids), "the <unk>");
    }

    #[test]
    fn newlines_survive() {
        let v = vocab();
        let text = "the cat\n\non  the mat";
        assert_eq!(v.detokenize(&v.encode(text)), "the cat\n\non the mat");
        assert_eq!(pieces("a\n b"), vec!["a", "\n", "b"]);
    }

    #[test]
    fn frequency_order_and_cap() {
        let v = vocab();
        // "the" occurs three times.
        assert_eq!(v.token(5), "the");
        let small = Vocabulary::build(["a b c d e f"], 7);
        assert_eq!(small.len(), 7);
    }

    #[test]
    fn mask_length_is_checked() {
        assert!(TokenSequence::with_mask(vec![1, 2], vec![true]).is_err());
    }
}
