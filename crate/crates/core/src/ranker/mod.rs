//! Relevance, importance and temporal scoring of candidate utterances.

mod ppr;
mod temporal;

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::corpus::QuestionType;
use crate::error::{Error, Result};
use crate::graph::MemoryGraph;
use crate::providers::{Embedding, TemporalEmbedder, TemporalRepr, TextEmbedder};

#[cfg(any(test, feature = "global-pagerank"))]
pub use ppr::global_pagerank;
pub use ppr::{
    personalized_pagerank, EdgeWeighting, PprOutcome, PprParams, WalkMatrix, DEFAULT_DAMPING,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
pub use temporal::{candidate_interval, extract_temporal_tokens, interval_affinity, DEFAULT_TAU_DAYS};

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub text: String,
    pub date: NaiveDate,
    pub query_type: QuestionType,
    pub temporal_tokens: Vec<String>,
    pub embedding: Embedding,
    /// Present exactly when `temporal_tokens` is non-empty.
    pub temporal: Option<TemporalRepr>,
}

impl Query {
    pub fn new(
        text: &str,
        date: NaiveDate,
        query_type: QuestionType,
        embedder: &dyn TextEmbedder,
        temporal: &dyn TemporalEmbedder,
    ) -> Result<Query> {
        if text.trim().is_empty() {
            return Err(Error::Argument("query text is empty".into()));
        }
        let temporal_tokens = extract_temporal_tokens(text);
        let repr = if temporal_tokens.is_empty() {
            None
        } else {
            Some(temporal.temporal_embed(&temporal_tokens, date)?)
        };
        Ok(Query {
            text: text.to_string(),
            date,
            query_type,
            temporal_tokens,
            embedding: embedder.embed(text)?,
            temporal: repr,
        })
    }

    pub fn temporal_applicable(&self) -> bool {
        !self.temporal_tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionScores {
    pub utterance_id: String,
    pub s_rel: f64,
    pub s_imp: f64,
    /// Absent exactly when `temporal_applicable` is false.
    pub s_temp: Option<f64>,
    pub temporal_applicable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    pub tau_days: f64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            tau_days: DEFAULT_TAU_DAYS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerConfig {
    pub ppr: PprParams,
    pub temporal: TemporalConfig,
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppr.validate()?;
        let tau = self.temporal.tau_days;
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!(
                "ranker.temporal.tau_days must be positive, got {tau}"
            )));
        }
        Ok(())
    }
}

fn utterance_embedding<'g>(graph: &'g MemoryGraph, id: &str) -> Result<&'g Embedding> {
    graph
        .utterance(id)
        .map(|u| &u.embedding)
        .ok_or_else(|| Error::Lookup {
            kind: "utterance",
            id: id.to_string(),
        })
}

/// Cosine between the query and each candidate.
pub fn relevance_scores(
    query: &Query,
    candidates: &[String],
    graph: &MemoryGraph,
) -> Result<BTreeMap<String, f64>> {
    candidates
        .iter()
        .map(|id| Ok((id.clone(), query.embedding.cosine(utterance_embedding(graph, id)?))))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub scores: BTreeMap<String, f64>,
    /// The query matched no utterance, so teleportation was uniform.
    pub teleport_fallback: bool,
    pub converged: bool,
    pub iterations: usize,
}

/// Query-personalized teleportation over graph positions: clamped cosine on
/// utterances, zero on clues, L1-normalized. Returns the vector and whether
/// the uniform fallback was used.
pub fn teleport_vector(query: &Query, graph: &MemoryGraph) -> (Vec<f64>, bool) {
    let index = graph.index();
    let mut t: Vec<f64> = (0..index.len())
        .map(|p| {
            if index.is_clue(p) {
                0.0
            } else {
                let u = graph.utterance(index.id(p)).expect("indexed utterance");
                query.embedding.cosine(&u.embedding).max(0.0)
            }
        })
        .collect();
    let total: f64 = t.iter().sum();
    if total > 0.0 {
        t.iter_mut().for_each(|x| *x /= total);
        return (t, false);
    }
    let share = 1.0 / graph.utterance_count() as f64;
    for (p, x) in t.iter_mut().enumerate() {
        *x = if index.is_clue(p) { 0.0 } else { share };
    }
    (t, true)
}

/// Personalized PageRank over the whole graph, read off for `nodes`.
pub fn importance_scores(
    query: &Query,
    graph: &MemoryGraph,
    nodes: &[String],
    params: &PprParams,
) -> Result<ImportanceScores> {
    let walk = WalkMatrix::from_index(graph.index(), params.edge_weighting)?;
    importance_scores_with(query, graph, &walk, nodes, params)
}

/// As [`importance_scores`], reusing a walk matrix built from `graph` with
/// `params.edge_weighting`.
pub fn importance_scores_with(
    query: &Query,
    graph: &MemoryGraph,
    walk: &WalkMatrix,
    nodes: &[String],
    params: &PprParams,
) -> Result<ImportanceScores> {
    if graph.utterance_count() == 0 {
        return Err(Error::Argument("graph has no utterances".into()));
    }
    let index = graph.index();
    if walk.len() != index.len() {
        return Err(Error::Argument(format!(
            "walk matrix has {} nodes but the graph has {}",
            walk.len(),
            index.len()
        )));
    }
    let positions = nodes
        .iter()
        .map(|id| {
            index.position(id).ok_or_else(|| Error::Lookup {
                kind: "node",
                id: id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (t, teleport_fallback) = teleport_vector(query, graph);
    let outcome = personalized_pagerank(walk, &t, params)?;
    if !outcome.converged {
        tracing::warn!(
            iterations = outcome.iterations,
            "importance scores did not converge; using last iterate"
        );
    }
    Ok(ImportanceScores {
        scores: nodes
            .iter()
            .zip(positions)
            .map(|(id, p)| (id.clone(), outcome.scores[p]))
            .collect(),
        teleport_fallback,
        converged: outcome.converged,
        iterations: outcome.iterations,
    })
}

/// Temporal match per candidate, or `None` when the query carries no
/// temporal expression.
///
/// A candidate's interval is its timestamp's day widened by the dates its
/// text mentions. When both sides carry provider embeddings the score is their
/// cosine clamped to [0, 1]; otherwise the interval kernel is used.
pub fn temporal_scores(
    query: &Query,
    candidates: &[String],
    graph: &MemoryGraph,
    provider: &dyn TemporalEmbedder,
    config: &TemporalConfig,
) -> Result<Option<BTreeMap<String, f64>>> {
    let Some(target) = &query.temporal else {
        return Ok(None);
    };
    let mut out = BTreeMap::new();
    for id in candidates {
        let node = graph.utterance(id).ok_or_else(|| Error::Lookup {
            kind: "utterance",
            id: id.clone(),
        })?;
        let day = node.utterance.timestamp.date_naive();
        let score = match &target.embedding {
            Some(q) => {
                let mut tokens = vec![day.format("%Y-%m-%d").to_string()];
                tokens.extend(
                    extract_temporal_tokens(&node.utterance.text)
                        .into_iter()
                        .filter(|t| crate::providers::resolve_token(t, day).is_some()),
                );
                let repr = provider.temporal_embed(&tokens, day)?;
                match &repr.embedding {
                    Some(c) => q.cosine(c).max(0.0),
                    None => interval_affinity(target, &repr, config.tau_days),
                }
            }
            None => interval_affinity(
                target,
                &candidate_interval(&node.utterance.text, day),
                config.tau_days,
            ),
        };
        out.insert(id.clone(), score);
    }
    Ok(Some(out))
}

/// All three dimensions for each candidate, in candidate order.
pub fn score_candidates(
    query: &Query,
    candidates: &[String],
    graph: &MemoryGraph,
    walk: &WalkMatrix,
    temporal: &dyn TemporalEmbedder,
    config: &RankerConfig,
) -> Result<(Vec<DimensionScores>, ImportanceScores)> {
    let rel = relevance_scores(query, candidates, graph)?;
    let imp = importance_scores_with(query, graph, walk, candidates, &config.ppr)?;
    let temp = temporal_scores(query, candidates, graph, temporal, &config.temporal)?;
    let scores = candidates
        .iter()
        .map(|id| DimensionScores {
            utterance_id: id.clone(),
            s_rel: rel[id],
            s_imp: imp.scores[id],
            s_temp: temp.as_ref().map(|m| m[id]),
            temporal_applicable: temp.is_some(),
        })
        .collect();
    Ok((scores, imp))
}
