//! Clue-stage filtering, candidate expansion, scoring, fusion and top-K
//! evidence selection.

use std::collections::BTreeSet;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::{EvalRecord, QuestionType};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse, fusion_weights, normalize_scores, softmax, Dimension, FusionModel, NormalizedScores,
    TrainingExample, Weights,
};
use crate::graph::MemoryGraph;
use crate::providers::{TemporalEmbedder, TextEmbedder};
use crate::ranker::{score_candidates, DimensionScores, Query, RankerConfig, WalkMatrix};

pub const DEFAULT_K_CLUES: usize = 10;
pub const DEFAULT_K_EVIDENCE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_clues: usize,
    pub k_evidence: usize,
    /// Score every utterance when the clue stage yields no candidates.
    pub fallback_global: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k_clues: DEFAULT_K_CLUES,
            k_evidence: DEFAULT_K_EVIDENCE,
            fallback_global: true,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_clues == 0 {
            return Err(Error::Config("retrieval.k_clues must be at least 1".into()));
        }
        if self.k_evidence == 0 {
            return Err(Error::Config("retrieval.k_evidence must be at least 1".into()));
        }
        Ok(())
    }
}

/// How fusion weights are chosen.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum WeightPolicy {
    /// Softmax over the model's CMI for the query type.
    #[default]
    Fitted,
    /// Fitted, with the listed dimensions removed from the softmax.
    Ablated(BTreeSet<Dimension>),
    /// The same weights for every query; a zero temporal weight still counts
    /// as active when the query has temporal tokens.
    Fixed { rel: f64, imp: f64, temp: f64 },
}

impl WeightPolicy {
    pub fn relevance_only() -> WeightPolicy {
        WeightPolicy::Fixed {
            rel: 1.0,
            imp: 0.0,
            temp: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalFlag {
    TemporalInapplicable,
    TeleportFallback,
    /// The clue stage produced no candidates.
    ClueFallback,
    PprUnconverged,
}

impl RetrievalFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalFlag::TemporalInapplicable => "temporal_inapplicable",
            RetrievalFlag::TeleportFallback => "teleport_fallback",
            RetrievalFlag::ClueFallback => "clue_fallback",
            RetrievalFlag::PprUnconverged => "ppr_unconverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedCandidate {
    pub utterance_id: String,
    pub timestamp: DateTime<Utc>,
    pub dimensions: DimensionScores,
    pub normalized: NormalizedScores,
    pub weights: Weights,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub text: String,
    pub date: NaiveDate,
    pub query_type: QuestionType,
    pub temporal_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: QuerySummary,
    pub evidence: Vec<FusedCandidate>,
    pub clue_trace: Vec<String>,
    pub candidate_count: usize,
    pub flags: BTreeSet<RetrievalFlag>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.evidence.iter().map(|c| c.utterance_id.as_str()).collect()
    }
}

/// Top `k` clues by cosine to the query, ties by id. Clues with no positive
/// similarity are never selected.
pub fn retrieve_clues(query: &Query, graph: &MemoryGraph, k: usize) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = graph
        .clues()
        .map(|c| (query.embedding.cosine(&c.embedding), c.id.as_str()))
        .filter(|(s, _)| *s > 0.0)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect()
}

/// Union of the member utterances of the given clues, in id order.
pub fn expand_candidates(clue_ids: &[String], graph: &MemoryGraph) -> Result<Vec<String>> {
    let mut out = BTreeSet::new();
    for id in clue_ids {
        let clue = graph.clue(id).ok_or_else(|| Error::Lookup {
            kind: "clue",
            id: id.clone(),
        })?;
        out.extend(clue.member_utterances.iter().cloned());
    }
    Ok(out.into_iter().collect())
}

/// A graph, a fusion model and the providers needed to answer queries.
pub struct Retriever<'a> {
    graph: &'a MemoryGraph,
    model: &'a FusionModel,
    embedder: &'a dyn TextEmbedder,
    temporal: &'a dyn TemporalEmbedder,
    ranker: RankerConfig,
    config: RetrievalConfig,
    policy: WeightPolicy,
    walk: WalkMatrix,
}

impl<'a> Retriever<'a> {
    pub fn new(
        graph: &'a MemoryGraph,
        model: &'a FusionModel,
        embedder: &'a dyn TextEmbedder,
        temporal: &'a dyn TemporalEmbedder,
        ranker: RankerConfig,
        config: RetrievalConfig,
    ) -> Result<Self> {
        ranker.validate()?;
        config.validate()?;
        graph.ensure_embedder(embedder)?;
        let walk = WalkMatrix::from_index(graph.index(), ranker.ppr.edge_weighting)?;
        Ok(Retriever {
            graph,
            model,
            embedder,
            temporal,
            ranker,
            config,
            policy: WeightPolicy::Fitted,
            walk,
        })
    }

    pub fn with_policy(mut self, policy: WeightPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn graph(&self) -> &MemoryGraph {
        self.graph
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn query(&self, text: &str, date: NaiveDate, query_type: QuestionType) -> Result<Query> {
        Query::new(text, date, query_type, self.embedder, self.temporal)
    }

    fn candidates(&self, query: &Query, flags: &mut BTreeSet<RetrievalFlag>) -> Result<(Vec<String>, Vec<String>)> {
        let clues = retrieve_clues(query, self.graph, self.config.k_clues);
        let mut candidates = expand_candidates(&clues, self.graph)?;
        if candidates.is_empty() {
            flags.insert(RetrievalFlag::ClueFallback);
            if self.config.fallback_global {
                candidates = self.graph.utterances().map(|u| u.utterance.id.clone()).collect();
            }
        }
        Ok((clues, candidates))
    }

    fn score(&self, query: &Query, candidates: &[String], flags: &mut BTreeSet<RetrievalFlag>) -> Result<Vec<DimensionScores>> {
        let (scores, importance) =
            score_candidates(query, candidates, self.graph, &self.walk, self.temporal, &self.ranker)?;
        if importance.teleport_fallback {
            flags.insert(RetrievalFlag::TeleportFallback);
        }
        if !importance.converged {
            flags.insert(RetrievalFlag::PprUnconverged);
        }
        Ok(scores)
    }

    fn weights(&self, query: &Query) -> Weights {
        let applicable = query.temporal_applicable();
        match &self.policy {
            WeightPolicy::Fitted => fusion_weights(self.model, query.query_type, applicable),
            WeightPolicy::Ablated(off) => {
                let cmi = self.model.cmi(query.query_type);
                let active: Vec<Dimension> = Dimension::ALL
                    .into_iter()
                    .filter(|d| !off.contains(d) && (*d != Dimension::Temp || applicable))
                    .collect();
                let w = softmax(&active.iter().map(|d| cmi[*d as usize]).collect::<Vec<_>>(), self.model.temperature);
                let weight_of = |d: Dimension| active.iter().position(|a| *a == d).map(|i| w[i]);
                Weights {
                    rel: weight_of(Dimension::Rel).unwrap_or(0.0),
                    imp: weight_of(Dimension::Imp).unwrap_or(0.0),
                    temp: weight_of(Dimension::Temp),
                }
            }
            WeightPolicy::Fixed { rel, imp, temp } => Weights {
                rel: *rel,
                imp: *imp,
                temp: applicable.then_some(*temp),
            },
        }
    }

    /// Runs the full pipeline for one query.
    pub fn retrieve(&self, query: &Query) -> Result<RetrievalResult> {
        self.retrieve_top(query, self.config.k_evidence)
    }

    /// As [`Retriever::retrieve`] but keeping the top `k` instead of the
    /// configured `k_evidence`.
    pub fn retrieve_top(&self, query: &Query, k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        let mut flags = BTreeSet::new();
        if !query.temporal_applicable() {
            flags.insert(RetrievalFlag::TemporalInapplicable);
        }
        let (clue_trace, candidates) = self.candidates(query, &mut flags)?;
        let summary = QuerySummary {
            text: query.text.clone(),
            date: query.date,
            query_type: query.query_type,
            temporal_tokens: query.temporal_tokens.clone(),
        };
        if candidates.is_empty() {
            return Ok(RetrievalResult {
                query: summary,
                evidence: Vec::new(),
                clue_trace,
                candidate_count: 0,
                flags,
            });
        }
        let dims = self.score(query, &candidates, &mut flags)?;
        let weights = self.weights(query);
        let mut evidence = Vec::with_capacity(dims.len());
        for (d, mut n) in dims.iter().zip(normalize_scores(&dims)) {
            if weights.temp.is_none() {
                n.temp = None;
            }
            let score = fuse(&n, &weights)?;
            let timestamp = self
                .graph
                .utterance(&d.utterance_id)
                .expect("candidate comes from the graph")
                .utterance
                .timestamp;
            evidence.push(FusedCandidate {
                utterance_id: d.utterance_id.clone(),
                timestamp,
                dimensions: d.clone(),
                normalized: n,
                weights,
                score,
            });
        }
        evidence.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.timestamp.cmp(&b.timestamp))
                .then_with(|| a.utterance_id.cmp(&b.utterance_id))
        });
        evidence.truncate(k);
        Ok(RetrievalResult {
            query: summary,
            evidence,
            clue_trace,
            candidate_count: candidates.len(),
            flags,
        })
    }

    /// Scored clue-stage candidates of a labeled record, for fitting fusion.
    /// Candidates missing from the record's labels count as not useful.
    /// Returns `None` when the clue stage yields no candidates.
    pub fn training_example(&self, record: &EvalRecord) -> Result<Option<TrainingExample>> {
        let query = self.query(&record.question, record.question_date, record.question_type)?;
        let mut flags = BTreeSet::new();
        let (_, candidates) = self.candidates(&query, &mut flags)?;
        if candidates.is_empty() {
            return Ok(None);
        }
        let scores = self.score(&query, &candidates, &mut flags)?;
        let labels = candidates
            .iter()
            .map(|id| u8::from(record.evidence_labels.get(id) == Some(&1)))
            .collect();
        Ok(Some(TrainingExample {
            query_type: record.question_type,
            scores,
            labels,
        }))
    }
}

/// One-shot retrieval with fitted weights.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_evidence(
    query: &Query,
    graph: &MemoryGraph,
    model: &FusionModel,
    embedder: &dyn TextEmbedder,
    temporal: &dyn TemporalEmbedder,
    ranker: RankerConfig,
    config: RetrievalConfig,
) -> Result<RetrievalResult> {
    Retriever::new(graph, model, embedder, temporal, ranker, config)?.retrieve(query)
}

/// Builds training examples for every labeled record, in record order.
pub fn training_examples(retriever: &Retriever<'_>, records: &[EvalRecord]) -> Result<Vec<TrainingExample>> {
    use rayon::prelude::*;
    let examples: Vec<Option<TrainingExample>> = records
        .par_iter()
        .filter(|r| !r.unlabeled)
        .map(|r| retriever.training_example(r).map_err(|e| e.context(format!("record {}", r.id))))
        .collect::<Result<_>>()?;
    Ok(examples.into_iter().flatten().collect())
}
