//! Dual-encoder dense retriever with exact dot-product search.
//!
//! Each encoder is a mean-pooled bag of token embeddings over the shared
//! word-level vocabulary. Relevance is `s(x, c) = E_q(x) · E_d(c)`; the top-k
//! results are re-normalized with a softmax to give `p_R(c | x)`.

pub mod checkpoint;
pub mod encoder;
pub mod index;

use crate::corpus::{Chunk, ChunkStore};
use crate::error::{Error, Result};

pub use encoder::{Embedding, Encoder, EncoderKind, Retriever, DEFAULT_DIM};
pub use index::EmbeddingIndex;

/// One hit of a top-k search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalResult {
    pub chunk_id: usize,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Dot product of two embeddings, accumulated in `f64`.
pub fn score(q: &Embedding, d: &Embedding) -> Result<f64> {
    dot_checked(q.values(), d.values())
}

pub(crate) fn dot_checked(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum())
}

/// Order by score descending, then chunk id ascending.
pub fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Exact top-k over every row of `index`.
pub fn search(retriever: &Retriever, index: &EmbeddingIndex, query: &str, k: usize) -> Result<Vec<RetrievalResult>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if index.fingerprint() != &retriever.document.fingerprint() {
        return Err(Error::StaleIndex);
    }
    let q = retriever.encode_query(query)?;
    search_embedding(index, &q, k)
}

/// Top-k for an already encoded query.
pub fn search_embedding(index: &EmbeddingIndex, q: &Embedding, k: usize) -> Result<Vec<RetrievalResult>> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if q.dim() != index.dim() {
        return Err(Error::Dimension {
            expected: index.dim(),
            actual: q.dim(),
        });
    }
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|i| (i, dot_checked(q.values(), index.row(i)).expect("dimensions checked")))
        .collect();
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(r, (chunk_id, score))| RetrievalResult {
            chunk_id,
            score,
            rank: r + 1,
        })
        .collect())
}

/// Softmax of raw scores with max subtraction.
pub fn softmax_scores(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `p_R(c | x)` re-normalized over the retrieved set.
pub fn retrieval_distribution(results: &[RetrievalResult]) -> Vec<f64> {
    softmax_scores(&results.iter().map(|r| r.score).collect::<Vec<_>>())
}

/// A retrieved chunk together with its retrieval weight.
#[derive(Debug, Clone)]
pub struct Retrieved<'a> {
    pub chunk: &'a Chunk,
    pub score: f64,
    pub rank: usize,
    /// `p_R(c | x)` over the retrieved set.
    pub weight: f64,
}

/// Retriever, index and store bundled for top-k lookups with chunk text.
#[derive(Clone, Copy)]
pub struct RetrievalContext<'a> {
    pub retriever: &'a Retriever,
    pub index: &'a EmbeddingIndex,
    pub store: &'a ChunkStore,
}

impl<'a> RetrievalContext<'a> {
    pub fn new(retriever: &'a Retriever, index: &'a EmbeddingIndex, store: &'a ChunkStore) -> Result<Self> {
        if index.len() != store.len() {
            return Err(Error::format(
                "index",
                format!("{} rows for a store of {} chunks", index.len(), store.len()),
            ));
        }
        Ok(Self { retriever, index, store })
    }

    pub fn top_k(&self, query: &str, k: usize) -> Result<Vec<Retrieved<'a>>> {
        let results = search(self.retriever, self.index, query, k)?;
        let weights = retrieval_distribution(&results);
        Ok(results
            .iter()
            .zip(weights)
            .map(|(r, weight)| Retrieved {
                chunk: self.store.get(r.chunk_id).expect("index aligned with store"),
                score: r.score,
                rank: r.rank,
                weight,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn dot_product_examples() {
        assert_eq!(score(&emb(&[1.0, 2.0]), &emb(&[3.0, 4.0])).unwrap(), 11.0);
        assert_eq!(score(&emb(&[1.0, 0.0]), &emb(&[0.0, 5.0])).unwrap(), 0.0);
        let (a, b) = (emb(&[0.3, -1.5, 2.0]), emb(&[1.1, 0.7, -0.2]));
        assert_eq!(score(&a, &b).unwrap(), score(&b, &a).unwrap());
        assert!(matches!(
            score(&emb(&[1.0]), &emb(&[1.0, 2.0])),
            Err(Error::Dimension { .. })
        ));
    }

    fn results(scores: &[f64]) -> Vec<RetrievalResult> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &score)| RetrievalResult {
                chunk_id: i,
                score,
                rank: i + 1,
            })
            .collect()
    }

    #[test]
    fn distribution_examples() {
        let p = retrieval_distribution(&results(&[1.0, 0.0]));
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);
        let p = retrieval_distribution(&results(&[0.4; 5]));
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert_eq!(retrieval_distribution(&results(&[-3.0])), vec![1.0]);
    }

    #[test]
    fn distribution_handles_large_scores() {
        let p = retrieval_distribution(&results(&[1000.0, 999.0, -1000.0]));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|x| x.is_finite()));
    }
}
