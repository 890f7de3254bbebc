use crate::error::{Error, Result};
use crate::text::tokenize;

use super::{Embedding, TextEmbedder};

pub const DEFAULT_DIM: usize = 4096;
pub const DEFAULT_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Hashed bag-of-tokens embedder.
///
/// Each lowercase alphanumeric token is hashed into one of `dim` buckets;
/// bucket counts are L2-normalized. Texts sharing tokens get positive cosine,
/// texts with disjoint buckets get exactly zero.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
    seed: u64,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        HashedEmbedder::new(DEFAULT_DIM)
    }
}

impl HashedEmbedder {
    pub const fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedEmbedder {
            dim,
            seed: DEFAULT_SEED,
        }
    }

    pub fn with_seed(dim: usize, seed: u64) -> Self {
        HashedEmbedder { seed, ..HashedEmbedder::new(dim) }
    }

    /// The bucket a (lowercased) token lands in.
    pub fn bucket(&self, token: &str) -> usize {
        // FNV-1a seeded through the offset basis, then a multiplicative finish.
        let mut h = self.seed;
        for b in token.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
        (h % self.dim as u64) as usize
    }

    fn embed_one(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::Argument("cannot embed empty text".into()));
        }
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            // Punctuation-only input still gets a stable vector.
            tokens.push(text.trim().to_lowercase());
        }
        let mut counts = vec![0.0; self.dim];
        for token in &tokens {
            counts[self.bucket(token)] += 1.0;
        }
        Embedding::normalized(counts)
    }
}

impl TextEmbedder for HashedEmbedder {
    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn fingerprint(&self) -> String {
        format!("hashed-bow:v1:dim={}:seed={:#018x}", self.dim, self.seed)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn raw_cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn deterministic_and_self_similar() {
        let e = HashedEmbedder::default();
        let a = e.embed("Where did I have dinner yesterday?").unwrap();
        let b = e.embed("Where did I have dinner yesterday?").unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(a.cosine(&b), 1.0);
        assert_eq!(a.dim(), DEFAULT_DIM);
    }

    #[test]
    fn disjoint_buckets_give_zero_cosine() {
        let e = HashedEmbedder::default();
        let left = "coffee latte espresso morning";
        let right = "mountain hiking trail boots";
        let lb: HashSet<_> = tokenize(left).iter().map(|t| e.bucket(t)).collect();
        let rb: HashSet<_> = tokenize(right).iter().map(|t| e.bucket(t)).collect();
        assert!(lb.is_disjoint(&rb), "fixture tokens collide at dim {DEFAULT_DIM}");
        let c = e.embed(left).unwrap().cosine(&e.embed(right).unwrap());
        assert_eq!(c, 0.0);
    }

    #[test]
    fn cosine_matches_dot_and_raw_formula() {
        let e = HashedEmbedder::default();
        let a = e.embed("the red fox jumps over the lazy dog").unwrap();
        let b = e.embed("a red dog sleeps").unwrap();
        assert!((a.cosine(&b) - a.dot(&b)).abs() < 1e-9);
        assert!((a.cosine(&b) - raw_cosine(a.values(), b.values())).abs() < 1e-9);
        // Shares "red" and "dog": 2 / sqrt(|a|^2 * 4) with "the" counted twice.
        let expected = 2.0 / ((1.0 * 4.0 + 6.0) * 4.0f64).sqrt();
        assert!((a.cosine(&b) - expected).abs() < 1e-12, "{}", a.cosine(&b));
    }

    #[test]
    fn empty_text_is_an_argument_error() {
        let e = HashedEmbedder::default();
        assert!(matches!(e.embed("  "), Err(Error::Argument(_))));
        assert!(e.embed("?!").is_ok());
    }

    #[test]
    fn fingerprint_tracks_configuration() {
        assert_ne!(
            HashedEmbedder::new(64).fingerprint(),
            HashedEmbedder::new(128).fingerprint()
        );
        assert_ne!(
            HashedEmbedder::with_seed(64, 1).fingerprint(),
            HashedEmbedder::with_seed(64, 2).fingerprint()
        );
    }
}
