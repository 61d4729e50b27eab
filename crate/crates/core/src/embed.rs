//! Per-word text embeddings: a deterministic pseudo-random generator plus
//! a file-backed cache for externally supplied vectors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const DEFAULT_D_EMBED: usize = 64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("empty token")]
    EmptyToken,
    #[error("embedding cache format error: {0}")]
    Format(String),
    #[error("embedding dimension error: {0}")]
    Dimension(String),
}

/// Unit-norm word embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        EmbeddingVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic stand-in for an external embedding service: a unit
/// Gaussian vector seeded by the token's FNV-1a hash XOR the global seed.
pub fn pseudo_embed(word: &str, d_embed: usize, global_seed: u64) -> Result<EmbeddingVector, EmbedError> {
    if word.is_empty() {
        return Err(EmbedError::EmptyToken);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(word.as_bytes()) ^ global_seed);
    let values: Vec<f64> = (0..d_embed)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(EmbeddingVector::normalized(values))
}

/// Where embeddings come from: pseudo-random or a JSON cache file with
/// pseudo fallback for misses.
#[derive(Clone, Debug)]
pub struct EmbeddingSource {
    pub d_embed: usize,
    pub global_seed: u64,
    pub cache: Option<EmbeddingCache>,
}

impl EmbeddingSource {
    pub fn pseudo(d_embed: usize, global_seed: u64) -> Self {
        EmbeddingSource {
            d_embed,
            global_seed,
            cache: None,
        }
    }

    pub fn with_cache(d_embed: usize, global_seed: u64, path: &Path) -> Result<Self, EmbedError> {
        let cache = EmbeddingCache::load(path, d_embed)?;
        Ok(EmbeddingSource {
            d_embed,
            global_seed,
            cache: Some(cache),
        })
    }
}

/// Vectors loaded from a JSON object mapping word -> float array;
/// normalized on load, one shared dimensionality.
#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    pub path: PathBuf,
    vectors: BTreeMap<String, EmbeddingVector>,
}

impl EmbeddingCache {
    pub fn load(path: &Path, d_embed: usize) -> Result<Self, EmbedError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EmbedError::Format(format!("{}: {e}", path.display())))?;
        let raw: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)
            .map_err(|e| EmbedError::Format(format!("{}: {e}", path.display())))?;
        let mut vectors = BTreeMap::new();
        for (word, values) in raw {
            if values.len() != d_embed {
                return Err(EmbedError::Dimension(format!(
                    "'{word}' has dimension {}, expected {d_embed}",
                    values.len()
                )));
            }
            vectors.insert(word, EmbeddingVector::normalized(values));
        }
        Ok(EmbeddingCache {
            path: path.to_path_buf(),
            vectors,
        })
    }

    pub fn get(&self, word: &str) -> Option<&EmbeddingVector> {
        self.vectors.get(word)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Embed each word; cache hits win, misses fall back to `pseudo_embed` and
/// are reported.
pub fn embed_utterance(
    words: &[String],
    source: &EmbeddingSource,
) -> Result<(Vec<EmbeddingVector>, Vec<String>), EmbedError> {
    let mut out = Vec::with_capacity(words.len());
    let mut misses = Vec::new();
    for w in words {
        match source.cache.as_ref().and_then(|c| c.get(w)) {
            Some(v) => out.push(v.clone()),
            None => {
                if source.cache.is_some() {
                    misses.push(w.clone());
                }
                out.push(pseudo_embed(w, source.d_embed, source.global_seed)?);
            }
        }
    }
    Ok((out, misses))
}
