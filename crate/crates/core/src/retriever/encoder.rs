use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::Vocabulary;

pub const DEFAULT_DIM: usize = 64;
/// Encoder tables start uniform in `[-INIT_RANGE, INIT_RANGE)`.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Query,
    Document,
}

/// A finite embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("embedding", "non-finite entry"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Mean-pooled token-embedding encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub dim: usize,
    /// `[vocab, dim]`, row-major.
    pub table: Vec<f32>,
    pub trainable: bool,
}

impl Encoder {
    pub fn random(kind: EncoderKind, vocab_len: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = (0..vocab_len * dim)
            .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE) as f32)
            .collect();
        Self {
            kind,
            dim,
            table,
            trainable: kind == EncoderKind::Query,
        }
    }

    pub fn vocab_len(&self) -> usize {
        self.table.len() / self.dim
    }

    pub fn row(&self, id: u32) -> &[f32] {
        let i = id as usize * self.dim;
        &self.table[i..i + self.dim]
    }

    /// Mean of the token rows, in `f64`.
    pub fn pool(&self, ids: &[u32]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("text has no tokens to encode".into()));
        }
        let mut acc = vec![0f64; self.dim];
        for &id in ids {
            if id as usize >= self.vocab_len() {
                return Err(Error::format("token sequence", format!("token id {id} out of range")));
            }
            for (a, &r) in acc.iter_mut().zip(self.row(id)) {
                *a += r as f64;
            }
        }
        let n = ids.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    pub fn encode_ids(&self, ids: &[u32]) -> Result<Embedding> {
        Embedding::new(self.pool(ids)?.into_iter().map(|v| v as f32).collect())
    }

    /// SHA-256 over the dimension and the parameter bytes.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for v in &self.table {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Query and document encoders over one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Retriever {
    pub vocab: Vocabulary,
    pub query: Encoder,
    pub document: Encoder,
}

impl Retriever {
    /// Both encoders start from the same seeded table, so identical words
    /// already score highly against each other before any tuning. They are
    /// separate copies and diverge once the query side is trained.
    pub fn new(vocab: Vocabulary, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let document = Encoder::random(EncoderKind::Document, vocab.len(), dim, &mut rng);
        let mut query = document.clone();
        query.kind = EncoderKind::Query;
        query.trainable = true;
        Ok(Self { vocab, query, document })
    }

    /// Encoders drawn independently of each other.
    pub fn new_independent(vocab: Vocabulary, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query = Encoder::random(EncoderKind::Query, vocab.len(), dim, &mut rng);
        let document = Encoder::random(EncoderKind::Document, vocab.len(), dim, &mut rng);
        Ok(Self { vocab, query, document })
    }

    pub fn dim(&self) -> usize {
        self.query.dim
    }

    pub fn encode(&self, kind: EncoderKind, text: &str) -> Result<Embedding> {
        let ids = self.vocab.encode(text);
        match kind {
            EncoderKind::Query => self.query.encode_ids(&ids),
            EncoderKind::Document => self.document.encode_ids(&ids),
        }
    }

    pub fn encode_query(&self, text: &str) -> Result<Embedding> {
        self.encode(EncoderKind::Query, text)
    }

    pub fn encode_document(&self, text: &str) -> Result<Embedding> {
        self.encode(EncoderKind::Document, text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn retriever() -> Retriever {
        let vocab = Vocabulary::build(["alpha beta gamma delta"], 100);
        Retriever::new(vocab, 8, 3).unwrap()
    }

    #[test]
    fn single_token_is_its_row() {
        let r = retriever();
        let id = r.vocab.id("beta");
        let e = r.encode_query("beta").unwrap();
        assert_eq!(e.values(), r.query.row(id));
    }

    #[test]
    fn two_tokens_average() {
        let r = retriever();
        let (a, b) = (r.query.row(r.vocab.id("alpha")), r.query.row(r.vocab.id("gamma")));
        let e = r.encode_query("alpha gamma").unwrap();
        for i in 0..8 {
            let expected = ((a[i] as f64 + b[i] as f64) / 2.0) as f32;
            assert_eq!(e.values()[i], expected);
        }
    }

    #[test]
    fn pooling_ignores_order() {
        let r = retriever();
        assert_eq!(r.encode_document("alpha beta").unwrap(), r.encode_document("beta alpha").unwrap());
    }

    #[test]
    fn empty_text_is_rejected() {
        let r = retriever();
        assert!(matches!(r.encode_query("   "), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn unknown_words_use_unk_row() {
        let r = retriever();
        assert_eq!(r.encode_query("zzz").unwrap().values(), r.query.row(crate::lm::UNK));
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let mut r = retriever();
        let before = r.document.fingerprint();
        r.document.table[5] += 1e-3;
        assert_ne!(before, r.document.fingerprint());
    }

    #[test]
    fn shared_init_keeps_separate_tables() {
        let mut r = retriever();
        assert_eq!(r.query.table, r.document.table);
        r.query.table[0] = 9.0;
        assert_ne!(r.query.table[0], r.document.table[0]);
        assert!(r.query.trainable && !r.document.trainable);
    }
}
