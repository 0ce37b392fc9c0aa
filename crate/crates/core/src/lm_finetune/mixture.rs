use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Task,
    Dialogue,
    /// Plain text from the chunk store.
    Unsupervised,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixtureSource {
    pub name: String,
    pub kind: SourceKind,
    /// Number of examples.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    /// Explicit per-source weights. When empty, task sources are weighted by
    /// their capped size.
    pub weights: BTreeMap<String, f64>,
    pub unsupervised_fraction: f64,
    pub dialogue_fraction: f64,
    /// Most distinct examples ever drawn from one source.
    pub cap: usize,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            weights: BTreeMap::new(),
            unsupervised_fraction: 0.10,
            dialogue_fraction: 0.05,
            cap: 7_500,
        }
    }
}

/// Sampling probability of every source.
///
/// Explicit weights are used as given (sources without one get zero).
/// Otherwise unsupervised and dialogue sources share their fixed fractions
/// and the remaining mass goes to task sources; within each group sources
/// are weighted by `min(size, cap)`. A group with no sources hands its share
/// back through the final renormalization.
pub fn mixture_weights(sources: &[MixtureSource], spec: &MixtureSpec) -> Result<Vec<f64>> {
    let capped = |s: &MixtureSource| s.size.min(spec.cap) as f64;
    let raw: Vec<f64> = if !spec.weights.is_empty() {
        if let Some(name) = spec.weights.keys().find(|n| !sources.iter().any(|s| &&s.name == n)) {
            return Err(Error::InvalidMixture(format!("weight for unknown source {name:?}")));
        }
        sources
            .iter()
            .map(|s| if s.size == 0 { 0.0 } else { spec.weights.get(&s.name).copied().unwrap_or(0.0) })
            .collect()
    } else {
        let fractions = [
            (SourceKind::Unsupervised, spec.unsupervised_fraction),
            (SourceKind::Dialogue, spec.dialogue_fraction),
            (SourceKind::Task, 1.0 - spec.unsupervised_fraction - spec.dialogue_fraction),
        ];
        let mut raw = vec![0.0; sources.len()];
        for (kind, fraction) in fractions {
            let total: f64 = sources.iter().filter(|s| s.kind == kind).map(capped).sum();
            if total > 0.0 {
                for (w, s) in raw.iter_mut().zip(sources) {
                    if s.kind == kind {
                        *w = fraction * capped(s) / total;
                    }
                }
            }
        }
        raw
    };
    if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidMixture("weights must be finite and non-negative".into()));
    }
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return Err(Error::InvalidMixture("all weights are zero".into()));
    }
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// Endless seeded stream of `(source, example)` draws. Each source only ever
/// yields the first `cap` examples of a seeded permutation of its examples.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    weights: Vec<f64>,
    cumulative: Vec<f64>,
    pools: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl MixtureSampler {
    pub fn new(sources: &[MixtureSource], spec: &MixtureSpec, seed: u64) -> Result<Self> {
        let weights = mixture_weights(sources, spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pools = sources
            .iter()
            .map(|s| {
                let mut ids: Vec<usize> = (0..s.size).collect();
                ids.shuffle(&mut rng);
                ids.truncate(spec.cap);
                ids
            })
            .collect();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self {
            weights,
            cumulative,
            pools,
            rng,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Iterator for MixtureSampler {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        let u: f64 = self.rng.gen();
        let mut source = self.cumulative.partition_point(|&c| c <= u);
        // Rounding can leave the last cumulative value just below 1.
        if source >= self.weights.len() || self.weights[source] == 0.0 {
            source = self.weights.iter().rposition(|&w| w > 0.0).expect("validated weights");
        }
        let pool = &self.pools[source];
        Some((source, pool[self.rng.gen_range(0..pool.len())]))
    }
}
