//! Pluggable text embedding, clue annotation, temporal resolution and answer
//! generation.
//!
//! Every interface has a deterministic in-process reference implementation
//! and an HTTP client for an external service. Embeddings leaving this module
//! are always unit-norm.

mod answer;
mod clue;
mod embed;
mod http;
mod temporal;

use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{MemoryBank, Session};
use crate::error::{Error, Result};

pub use answer::{render_generation_prompt, ReferenceAnswerer, GENERATION_PROMPT, NO_ANSWER};
pub use clue::{render_topic_prompt, FallbackAnnotator, TfIdfAnnotator, CLUE_TERMS, TOPIC_PROMPT};
pub use embed::{HashedEmbedder, DEFAULT_DIM, DEFAULT_SEED};
pub use http::{
    HttpAnnotator, HttpAnswerer, HttpClient, HttpEmbedder, HttpTemporalEmbedder, EMBED_BATCH,
};
pub use temporal::{resolve_token, ReferenceTemporalResolver};

const NORM_TOLERANCE: f64 = 1e-9;

/// A unit-norm vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// L2-normalizes `values`. Fails on empty, non-finite, or all-zero input.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("embedding has zero dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("embedding contains non-finite values".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Argument("cannot normalize an all-zero embedding".into()));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Embedding { values })
    }

    /// Wraps values that are already unit-norm (checked to 1e-9).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if values.is_empty() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Validation(format!(
                "embedding norm {norm} is not 1 within {NORM_TOLERANCE}"
            )));
        }
        Ok(Embedding { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Cosine similarity of two unit vectors, clamped to [-1, 1].
    pub fn cosine(&self, other: &Embedding) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.dot(other).clamp(-1.0, 1.0)
    }
}

// Stored sparsely: reference embeddings are mostly zeros.
#[derive(Serialize, Deserialize)]
struct SparseEmbedding {
    dim: usize,
    nz: Vec<(usize, f64)>,
}

impl Serialize for Embedding {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SparseEmbedding {
            dim: self.values.len(),
            nz: self
                .values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let sparse = SparseEmbedding::deserialize(d)?;
        let mut values = vec![0.0; sparse.dim];
        for (i, v) in sparse.nz {
            let slot = values
                .get_mut(i)
                .ok_or_else(|| serde::de::Error::custom(format!("index {i} out of range")))?;
            *slot = v;
        }
        Embedding::from_unit(values).map_err(serde::de::Error::custom)
    }
}

/// A resolved time interval (inclusive at second precision), optionally with
/// a service-produced embedding of the temporal expression.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalRepr {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub embedding: Option<Embedding>,
}

impl TemporalRepr {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self> {
        if start > end {
            return Err(Error::Argument(format!("interval start {start} after end {end}")));
        }
        Ok(TemporalRepr {
            start,
            end,
            embedding: None,
        })
    }

    /// The whole calendar day.
    pub fn day(date: NaiveDate) -> Self {
        temporal::day_interval(date)
    }

    /// Smallest interval covering both.
    pub fn hull(&self, other: &TemporalRepr) -> TemporalRepr {
        TemporalRepr {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
            embedding: None,
        }
    }
}

pub trait TextEmbedder: Send + Sync {
    /// Vector length, when known before the first call.
    fn dim(&self) -> Option<usize>;

    /// Identifies the embedding configuration; graphs record it.
    fn fingerprint(&self) -> String;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>>;

    fn embed(&self, text: &str) -> Result<Embedding> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| Error::Validation("embedder returned no vectors".into()))
    }
}

pub trait ClueAnnotator: Send + Sync {
    fn annotate(&self, session: &Session) -> Result<String>;
}

pub trait TemporalEmbedder: Send + Sync {
    /// Resolves the tokens against `reference` into one interval.
    fn temporal_embed(&self, tokens: &[String], reference: NaiveDate) -> Result<TemporalRepr>;
}

pub trait AnswerGenerator: Send + Sync {
    fn generate_answer(&self, question: &str, evidence: &[&str]) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Reference,
    Http,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_retry_count() -> u32 {
    2
}
fn default_max_in_flight() -> usize {
    8
}
fn default_separator() -> String {
    ";".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retry_count")]
    pub retry_count: u32,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Fall back to the reference implementation when the service fails.
    #[serde(default)]
    pub fallback: bool,
    /// Reference embedder dimension.
    #[serde(default)]
    pub dim: Option<usize>,
    /// Overrides the shipped prompt template.
    #[serde(default)]
    pub prompt_file: Option<PathBuf>,
    /// Joins evidence texts in the generation prompt.
    #[serde(default = "default_separator")]
    pub separator: String,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Reference,
            endpoint: None,
            timeout_ms: default_timeout_ms(),
            retry_count: default_retry_count(),
            api_key_env: None,
            max_in_flight: default_max_in_flight(),
            fallback: false,
            dim: None,
            prompt_file: None,
            separator: default_separator(),
        }
    }
}

impl ProviderConfig {
    pub fn http(endpoint: impl Into<String>) -> Self {
        ProviderConfig {
            kind: ProviderKind::Http,
            endpoint: Some(endpoint.into()),
            ..Default::default()
        }
    }

    /// `name` prefixes messages, e.g. `provider.embedding`.
    pub fn validate(&self, name: &str) -> Result<()> {
        match (self.kind, &self.endpoint) {
            (ProviderKind::Http, None) => {
                return Err(Error::Config(format!(
                    "{name}.endpoint is required when {name}.kind = http"
                )))
            }
            (ProviderKind::Reference, Some(_)) => {
                return Err(Error::Config(format!(
                    "{name}.endpoint is only valid when {name}.kind = http"
                )))
            }
            _ => {}
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config(format!("{name}.timeout_ms must be positive")));
        }
        if self.retry_count > 10 {
            return Err(Error::Config(format!("{name}.retry_count must be at most 10")));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config(format!("{name}.max_in_flight must be at least 1")));
        }
        if self.dim == Some(0) {
            return Err(Error::Config(format!("{name}.dim must be positive")));
        }
        Ok(())
    }

    fn template(&self, shipped: &str) -> Result<String> {
        match &self.prompt_file {
            Some(path) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e)),
            None => Ok(shipped.to_string()),
        }
    }
}

pub fn build_embedder(cfg: &ProviderConfig) -> Result<Arc<dyn TextEmbedder>> {
    cfg.validate("provider.embedding")?;
    Ok(match cfg.kind {
        ProviderKind::Reference => Arc::new(HashedEmbedder::new(cfg.dim.unwrap_or(DEFAULT_DIM))),
        ProviderKind::Http => Arc::new(HttpEmbedder::new(HttpClient::from_config(cfg)?)),
    })
}

/// The reference annotator freezes document frequencies from `bank`.
pub fn build_annotator(cfg: &ProviderConfig, bank: &MemoryBank) -> Result<Arc<dyn ClueAnnotator>> {
    cfg.validate("provider.clue")?;
    let reference = TfIdfAnnotator::from_bank(bank);
    Ok(match cfg.kind {
        ProviderKind::Reference => Arc::new(reference),
        ProviderKind::Http => {
            let http = HttpAnnotator::new(HttpClient::from_config(cfg)?, cfg.template(TOPIC_PROMPT)?);
            if cfg.fallback {
                Arc::new(FallbackAnnotator::new(Box::new(http), Box::new(reference)))
            } else {
                Arc::new(http)
            }
        }
    })
}

pub fn build_temporal(cfg: &ProviderConfig) -> Result<Arc<dyn TemporalEmbedder>> {
    cfg.validate("provider.temporal")?;
    Ok(match cfg.kind {
        ProviderKind::Reference => Arc::new(ReferenceTemporalResolver),
        ProviderKind::Http => Arc::new(HttpTemporalEmbedder::new(HttpClient::from_config(cfg)?)),
    })
}

pub fn build_answerer(cfg: &ProviderConfig) -> Result<Arc<dyn AnswerGenerator>> {
    cfg.validate("provider.answer")?;
    Ok(match cfg.kind {
        ProviderKind::Reference => Arc::new(ReferenceAnswerer),
        ProviderKind::Http => Arc::new(HttpAnswerer::new(
            HttpClient::from_config(cfg)?,
            cfg.template(GENERATION_PROMPT)?,
            cfg.separator.clone(),
        )),
    })
}
