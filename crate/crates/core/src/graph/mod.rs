//! The associative memory graph.
//!
//! Each session gets a clue (a short topical cue). Clues whose embeddings are
//! more similar than `delta` are merged (single-link closure), every
//! utterance is owned by exactly one merged clue, and nodes of the same type
//! whose similarity exceeds `gamma` are joined by similarity edges.

mod persist;
mod union_find;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{MemoryBank, Utterance, UtteranceLookup};
use crate::error::{Error, Result};
use crate::providers::{ClueAnnotator, Embedding, TextEmbedder};

pub use persist::{load_graph, save_graph, GRAPH_SCHEMA_VERSION};
pub use union_find::DisjointSets;

pub const DEFAULT_DELTA: f64 = 0.85;
pub const DEFAULT_GAMMA: f64 = 0.80;
pub const DEFAULT_NODE_CEILING: usize = 200_000;

const CLUE_PREFIX: &str = "clue:";

/// Thresholds and limits for a graph build.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    /// Clue merge threshold, in (0, 1].
    pub delta: f64,
    /// Similarity edge threshold, in (0, 1).
    pub gamma: f64,
    /// Largest utterance count for the exact all-pairs similarity pass.
    #[serde(default = "default_node_ceiling")]
    pub node_ceiling: usize,
}

fn default_node_ceiling() -> usize {
    DEFAULT_NODE_CEILING
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            delta: DEFAULT_DELTA,
            gamma: DEFAULT_GAMMA,
            node_ceiling: DEFAULT_NODE_CEILING,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("graph.delta must lie in (0, 1], got {}", self.delta)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("graph.gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.node_ceiling == 0 {
            return Err(Error::Config("graph.node_ceiling must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clue {
    pub id: String,
    pub text: String,
    pub embedding: Embedding,
    pub member_utterances: BTreeSet<String>,
    /// Ids of the per-session clues folded into this one.
    pub merged_from: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    Ownership,
    ClueSim,
    UttSim,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Ownership => "ownership",
            EdgeKind::ClueSim => "clue_sim",
            EdgeKind::UttSim => "utt_sim",
        }
    }

    pub fn parse(s: &str) -> Option<EdgeKind> {
        match s {
            "ownership" => Some(EdgeKind::Ownership),
            "clue_sim" => Some(EdgeKind::ClueSim),
            "utt_sim" => Some(EdgeKind::UttSim),
            _ => None,
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Undirected edge stored with `src < dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub kind: EdgeKind,
    pub weight: f64,
}

impl Edge {
    pub fn new(a: &str, b: &str, kind: EdgeKind, weight: f64) -> Self {
        let (src, dst) = if a <= b { (a, b) } else { (b, a) };
        Edge {
            src: src.to_string(),
            dst: dst.to_string(),
            kind,
            weight,
        }
    }

    fn sort_key(&self) -> (&str, &str, EdgeKind) {
        (&self.src, &self.dst, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    pub delta: f64,
    pub gamma: f64,
    pub embedder: String,
    pub bank_digest: String,
    pub node_ceiling: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceNode {
    #[serde(flatten)]
    pub utterance: Utterance,
    pub embedding: Embedding,
}

/// Positions of nodes in the walk matrix: clues first, then utterances,
/// each block in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeIndex {
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    clue_count: usize,
    /// Per node: (neighbour position, edge weight), neighbours ascending.
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl NodeIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn id(&self, position: usize) -> &str {
        &self.ids[position]
    }

    pub fn is_clue(&self, position: usize) -> bool {
        position < self.clue_count
    }

    pub fn neighbours(&self, position: usize) -> &[(usize, f64)] {
        &self.adjacency[position]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryGraph {
    clues: BTreeMap<String, Clue>,
    utterances: BTreeMap<String, UtteranceNode>,
    edges: Vec<Edge>,
    params: BuildParams,
    owner: HashMap<String, String>,
    index: NodeIndex,
}

impl UtteranceLookup for MemoryGraph {
    fn contains_utterance(&self, id: &str) -> bool {
        self.utterances.contains_key(id)
    }
}

impl MemoryGraph {
    /// Assembles a graph, checking every structural invariant.
    pub fn from_parts(
        clues: Vec<Clue>,
        utterances: Vec<UtteranceNode>,
        mut edges: Vec<Edge>,
        params: BuildParams,
    ) -> Result<Self> {
        let mut clue_map = BTreeMap::new();
        for c in clues {
            if c.member_utterances.is_empty() {
                return Err(Error::Validation(format!("clue `{}` owns no utterances", c.id)));
            }
            if let Some(dup) = clue_map.insert(c.id.clone(), c) {
                return Err(Error::Validation(format!("duplicate clue id `{}`", dup.id)));
            }
        }
        let mut utt_map = BTreeMap::new();
        for u in utterances {
            if clue_map.contains_key(&u.utterance.id) {
                return Err(Error::Validation(format!(
                    "utterance id `{}` collides with a clue id",
                    u.utterance.id
                )));
            }
            if let Some(dup) = utt_map.insert(u.utterance.id.clone(), u) {
                return Err(Error::Validation(format!(
                    "duplicate utterance id `{}`",
                    dup.utterance.id
                )));
            }
        }

        let dims: BTreeSet<usize> = clue_map
            .values()
            .map(|c| c.embedding.dim())
            .chain(utt_map.values().map(|u| u.embedding.dim()))
            .collect();
        if dims.len() > 1 {
            return Err(Error::Config(format!(
                "clue and utterance embeddings disagree on dimension: {dims:?}"
            )));
        }

        let mut owner = HashMap::new();
        for clue in clue_map.values() {
            for uid in &clue.member_utterances {
                if !utt_map.contains_key(uid) {
                    return Err(Error::Validation(format!(
                        "clue `{}` owns unknown utterance `{uid}`",
                        clue.id
                    )));
                }
                if let Some(prev) = owner.insert(uid.clone(), clue.id.clone()) {
                    return Err(Error::Validation(format!(
                        "utterance `{uid}` owned by both `{prev}` and `{}`",
                        clue.id
                    )));
                }
            }
        }
        if let Some(orphan) = utt_map.keys().find(|id| !owner.contains_key(*id)) {
            return Err(Error::Validation(format!("utterance `{orphan}` has no owning clue")));
        }

        edges.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let mut ownership_seen = BTreeSet::new();
        for (i, e) in edges.iter().enumerate() {
            if e.src >= e.dst {
                return Err(Error::Validation(format!(
                    "edge #{i} ({}, {}) is not in canonical order",
                    e.src, e.dst
                )));
            }
            if i > 0 && edges[i - 1].sort_key() == e.sort_key() {
                return Err(Error::Validation(format!("duplicate edge ({}, {})", e.src, e.dst)));
            }
            let (src_clue, dst_clue) = (clue_map.contains_key(&e.src), clue_map.contains_key(&e.dst));
            let (src_utt, dst_utt) = (utt_map.contains_key(&e.src), utt_map.contains_key(&e.dst));
            if !(src_clue || src_utt) || !(dst_clue || dst_utt) {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) references an unknown node",
                    e.src, e.dst
                )));
            }
            let ok = match e.kind {
                EdgeKind::ClueSim => src_clue && dst_clue,
                EdgeKind::UttSim => src_utt && dst_utt,
                EdgeKind::Ownership => {
                    let (u, c) = if src_utt { (&e.src, &e.dst) } else { (&e.dst, &e.src) };
                    let owned = owner.get(u.as_str()) == Some(c);
                    owned && ownership_seen.insert(u.clone())
                }
            };
            if !ok {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) of kind {} is inconsistent with the node types or ownership",
                    e.src, e.dst, e.kind
                )));
            }
            if !e.weight.is_finite() || e.weight <= 0.0 {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) has invalid weight {}",
                    e.src, e.dst, e.weight
                )));
            }
        }
        if ownership_seen.len() != utt_map.len() {
            return Err(Error::Validation(
                "every utterance needs exactly one ownership edge".into(),
            ));
        }

        let ids: Vec<String> = clue_map.keys().chain(utt_map.keys()).cloned().collect();
        let positions: HashMap<String, usize> =
            ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut adjacency = vec![Vec::new(); ids.len()];
        for e in &edges {
            let (a, b) = (positions[&e.src], positions[&e.dst]);
            adjacency[a].push((b, e.weight));
            adjacency[b].push((a, e.weight));
        }
        for list in &mut adjacency {
            list.sort_by_key(|(n, _)| *n);
        }
        let index = NodeIndex {
            clue_count: clue_map.len(),
            ids,
            positions,
            adjacency,
        };
        Ok(MemoryGraph {
            clues: clue_map,
            utterances: utt_map,
            edges,
            params,
            owner,
            index,
        })
    }

    pub fn clues(&self) -> impl Iterator<Item = &Clue> {
        self.clues.values()
    }

    pub fn clue(&self, id: &str) -> Option<&Clue> {
        self.clues.get(id)
    }

    pub fn clue_count(&self) -> usize {
        self.clues.len()
    }

    pub fn utterances(&self) -> impl Iterator<Item = &UtteranceNode> {
        self.utterances.values()
    }

    pub fn utterance(&self, id: &str) -> Option<&UtteranceNode> {
        self.utterances.get(id)
    }

    pub fn utterance_count(&self) -> usize {
        self.utterances.len()
    }

    pub fn owner_of(&self, utterance_id: &str) -> Option<&str> {
        self.owner.get(utterance_id).map(String::as_str)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn params(&self) -> &BuildParams {
        &self.params
    }

    pub fn index(&self) -> &NodeIndex {
        &self.index
    }

    pub fn dim(&self) -> Option<usize> {
        self.utterances.values().next().map(|u| u.embedding.dim())
    }

    /// All similarity edges as `(src, dst)` pairs.
    pub fn similarity_pairs(&self) -> BTreeSet<(String, String)> {
        self.edges
            .iter()
            .filter(|e| e.kind != EdgeKind::Ownership)
            .map(|e| (e.src.clone(), e.dst.clone()))
            .collect()
    }

    /// Refuses an embedder other than the one the graph was built with.
    pub fn ensure_embedder(&self, embedder: &dyn TextEmbedder) -> Result<()> {
        let configured = embedder.fingerprint();
        if configured != self.params.embedder {
            return Err(Error::Config(format!(
                "graph was built with embedder `{}` but `{configured}` is configured; rebuild the graph",
                self.params.embedder
            )));
        }
        Ok(())
    }

    /// Refuses a bank other than the one the graph was built from.
    pub fn ensure_bank(&self, bank: &MemoryBank) -> Result<()> {
        let digest = bank.digest();
        if digest != self.params.bank_digest {
            return Err(Error::Config(format!(
                "graph was built from a different memory bank (digest {} vs {digest})",
                self.params.bank_digest
            )));
        }
        Ok(())
    }
}

pub fn clue_id(session_id: &str) -> String {
    format!("{CLUE_PREFIX}{session_id}")
}

/// One clue per session, owning that session's utterances.
pub fn build_clues(
    bank: &MemoryBank,
    annotator: &dyn ClueAnnotator,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<Clue>> {
    if bank.sessions.is_empty() {
        return Err(Error::Argument("cannot build clues for an empty bank".into()));
    }
    let texts: Vec<String> = bank
        .sessions
        .par_iter()
        .map(|s| {
            annotator
                .annotate(s)
                .map_err(|e| e.context(format!("annotating session `{}`", s.id)))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let embeddings = embed_all(embedder, &refs).map_err(|e| e.context("embedding clues"))?;
    Ok(bank
        .sessions
        .iter()
        .zip(texts)
        .zip(embeddings)
        .map(|((s, text), embedding)| {
            let id = clue_id(&s.id);
            Clue {
                merged_from: vec![id.clone()],
                id,
                text,
                embedding,
                member_utterances: s.utterances.iter().map(|u| u.id.clone()).collect(),
            }
        })
        .collect())
}

/// Merges clues whose pairwise similarity exceeds `delta`, closing
/// transitively. A merged clue takes the smallest member id, the member texts
/// joined in id order (re-embedded), and the union of memberships. The result
/// is sorted by id and does not depend on input order.
pub fn merge_clues(clues: &[Clue], delta: f64, embedder: &dyn TextEmbedder) -> Result<Vec<Clue>> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Argument(format!("delta must lie in (0, 1], got {delta}")));
    }
    let dims: BTreeSet<usize> = clues.iter().map(|c| c.embedding.dim()).collect();
    if dims.len() > 1 {
        return Err(Error::Argument(format!("clue embeddings disagree on dimension: {dims:?}")));
    }
    let mut sorted: Vec<&Clue> = clues.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let mut sets = DisjointSets::new(sorted.len());
    for (i, j) in similar_pairs(&sorted.iter().map(|c| &c.embedding).collect::<Vec<_>>(), delta) {
        sets.union(i, j);
    }

    let groups = sets.groups();
    let merged_texts: Vec<Option<String>> = groups
        .iter()
        .map(|g| {
            (g.len() > 1).then(|| {
                g.iter()
                    .map(|&i| sorted[i].text.as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
        })
        .collect();
    let to_embed: Vec<&str> = merged_texts.iter().flatten().map(String::as_str).collect();
    let mut fresh = embed_all(embedder, &to_embed)
        .map_err(|e| e.context("embedding merged clues"))?
        .into_iter();

    let mut out = Vec::with_capacity(groups.len());
    for (group, text) in groups.iter().zip(merged_texts) {
        let first = sorted[group[0]];
        match text {
            None => out.push(first.clone()),
            Some(text) => {
                let mut merged_from: Vec<String> = group
                    .iter()
                    .flat_map(|&i| sorted[i].merged_from.iter().cloned())
                    .collect();
                merged_from.sort();
                merged_from.dedup();
                out.push(Clue {
                    id: first.id.clone(),
                    text,
                    embedding: fresh.next().expect("one embedding per merged group"),
                    member_utterances: group
                        .iter()
                        .flat_map(|&i| sorted[i].member_utterances.iter().cloned())
                        .collect(),
                    merged_from,
                });
            }
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Embeds every utterance, adds ownership edges and within-type similarity
/// edges (similarity strictly above `gamma`, weighted by the similarity).
pub fn build_graph(
    bank: &MemoryBank,
    merged_clues: Vec<Clue>,
    config: &GraphConfig,
    embedder: &dyn TextEmbedder,
) -> Result<MemoryGraph> {
    let GraphConfig {
        delta,
        gamma,
        node_ceiling,
    } = *config;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Argument(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let count = bank.utterance_count();
    if count > node_ceiling {
        return Err(Error::Config(format!(
            "{count} utterances exceed the exact similarity ceiling of {node_ceiling}; \
             raise graph.node_ceiling or split the bank"
        )));
    }
    let mut owned = BTreeSet::new();
    for c in &merged_clues {
        for u in &c.member_utterances {
            if !owned.insert(u.as_str()) {
                return Err(Error::Validation(format!("utterance `{u}` owned by several clues")));
            }
        }
    }
    let bank_ids: BTreeSet<&str> = bank.utterances().map(|u| u.id.as_str()).collect();
    if owned != bank_ids {
        let missing: Vec<_> = bank_ids.difference(&owned).take(5).collect();
        let extra: Vec<_> = owned.difference(&bank_ids).take(5).collect();
        return Err(Error::Validation(format!(
            "clues do not partition the bank (unowned: {missing:?}, unknown: {extra:?})"
        )));
    }

    let texts: Vec<&str> = bank.utterances().map(|u| u.text.as_str()).collect();
    let embeddings = embed_all(embedder, &texts).map_err(|e| e.context("embedding utterances"))?;
    if let (Some(c), Some(u)) = (merged_clues.first(), embeddings.first()) {
        if c.embedding.dim() != u.dim() {
            return Err(Error::Config(format!(
                "clue embeddings have dimension {} but utterance embeddings {}",
                c.embedding.dim(),
                u.dim()
            )));
        }
    }
    let mut nodes: Vec<UtteranceNode> = bank
        .utterances()
        .cloned()
        .zip(embeddings)
        .map(|(utterance, embedding)| UtteranceNode { utterance, embedding })
        .collect();
    nodes.sort_by(|a, b| a.utterance.id.cmp(&b.utterance.id));

    let mut clues = merged_clues;
    clues.sort_by(|a, b| a.id.cmp(&b.id));

    let mut edges = Vec::new();
    for c in &clues {
        for u in &c.member_utterances {
            edges.push(Edge::new(&c.id, u, EdgeKind::Ownership, 1.0));
        }
    }
    let clue_vecs: Vec<&Embedding> = clues.iter().map(|c| &c.embedding).collect();
    for (i, j) in similar_pairs(&clue_vecs, gamma) {
        let w = clue_vecs[i].cosine(clue_vecs[j]);
        edges.push(Edge::new(&clues[i].id, &clues[j].id, EdgeKind::ClueSim, w));
    }
    let utt_vecs: Vec<&Embedding> = nodes.iter().map(|n| &n.embedding).collect();
    for (i, j) in similar_pairs(&utt_vecs, gamma) {
        let w = utt_vecs[i].cosine(utt_vecs[j]);
        edges.push(Edge::new(
            &nodes[i].utterance.id,
            &nodes[j].utterance.id,
            EdgeKind::UttSim,
            w,
        ));
    }

    let params = BuildParams {
        delta,
        gamma,
        embedder: embedder.fingerprint(),
        bank_digest: bank.digest(),
        node_ceiling,
    };
    MemoryGraph::from_parts(clues, nodes, edges, params)
}

/// The whole pipeline: per-session clues, merging, graph assembly.
pub fn build_memory_graph(
    bank: &MemoryBank,
    annotator: &dyn ClueAnnotator,
    embedder: &dyn TextEmbedder,
    config: &GraphConfig,
) -> Result<MemoryGraph> {
    config.validate()?;
    let clues = build_clues(bank, annotator, embedder)?;
    let merged = merge_clues(&clues, config.delta, embedder)?;
    build_graph(bank, merged, config, embedder)
}

/// All index pairs `i < j` with cosine strictly above `threshold`, ascending.
fn similar_pairs(vectors: &[&Embedding], threshold: f64) -> Vec<(usize, usize)> {
    (0..vectors.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            ((i + 1)..vectors.len())
                .filter(move |&j| vectors[i].cosine(vectors[j]) > threshold)
                .map(move |j| (i, j))
        })
        .collect()
}

fn embed_all(embedder: &dyn TextEmbedder, texts: &[&str]) -> Result<Vec<Embedding>> {
    const CHUNK: usize = 256;
    let chunks: Vec<Vec<Embedding>> = texts
        .par_chunks(CHUNK)
        .map(|chunk| embedder.embed_batch(chunk))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests;
