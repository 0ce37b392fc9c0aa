//! Dense index of document embeddings aligned to chunk-store ids.
//!
//! File layout: `RIDX1`, `n` and `d` as u64 little-endian, `n·d` f32
//! little-endian row-major, then the 32-byte fingerprint of the document
//! encoder the rows were computed with.

use std::fs;
use std::path::Path;

use crate::binio::Reader;
use crate::corpus::ChunkStore;
use crate::error::{Error, Result};
use crate::retriever::Retriever;

const MAGIC: &[u8; 5] = b"RIDX1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    n: usize,
    d: usize,
    rows: Vec<f32>,
    fingerprint: [u8; 32],
}

impl EmbeddingIndex {
    pub fn build(retriever: &Retriever, store: &ChunkStore) -> Result<Self> {
        let d = retriever.dim();
        let mut rows = Vec::with_capacity(store.len() * d);
        for chunk in store.chunks() {
            rows.extend_from_slice(retriever.encode_document(&chunk.text)?.values());
        }
        Ok(Self {
            n: store.len(),
            d,
            rows,
            fingerprint: retriever.document.fingerprint(),
        })
    }

    pub fn from_rows(d: usize, rows: Vec<f32>, fingerprint: [u8; 32]) -> Result<Self> {
        if d == 0 || rows.len() % d != 0 {
            return Err(Error::format("index", "row buffer is not a multiple of the dimension"));
        }
        Ok(Self {
            n: rows.len() / d,
            d,
            rows,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 16 + self.rows.len() * 4 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.fingerprint);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "index");
        r.magic(MAGIC)?;
        let n = r.usize()?;
        let d = r.usize()?;
        let count = n.checked_mul(d).ok_or_else(|| Error::format("index", "size overflow"))?;
        let rows = r.f32s(count)?;
        let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
        r.finish()?;
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("index", "non-finite entry"));
        }
        Ok(Self { n, d, rows, fingerprint })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
