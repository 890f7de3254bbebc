use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{BuildParams, Clue, Edge, EdgeKind, MemoryGraph, UtteranceNode};

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GraphFile {
    schema: u32,
    params: BuildParams,
    clues: Vec<Clue>,
    utterances: Vec<UtteranceNode>,
    edges: Vec<(String, String, String, f64)>,
}

impl MemoryGraph {
    /// Canonical serialization: nodes in id order, edges sorted.
    pub fn to_canonical_json(&self) -> String {
        let file = GraphFile {
            schema: GRAPH_SCHEMA_VERSION,
            params: self.params.clone(),
            clues: self.clues.values().cloned().collect(),
            utterances: self.utterances.values().cloned().collect(),
            edges: self
                .edges
                .iter()
                .map(|e| (e.src.clone(), e.dst.clone(), e.kind.as_str().to_string(), e.weight))
                .collect(),
        };
        let mut json = serde_json::to_string(&file).expect("graph serialization is infallible");
        json.push('\n');
        json
    }

    pub fn from_json(text: &str, source: &str) -> Result<MemoryGraph> {
        let file: GraphFile = serde_json::from_str(text).map_err(|e| Error::format(source, &e))?;
        if file.schema != GRAPH_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "{source}: unsupported graph schema {} (expected {GRAPH_SCHEMA_VERSION})",
                file.schema
            )));
        }
        let mut edges = Vec::with_capacity(file.edges.len());
        for (i, (src, dst, kind, weight)) in file.edges.into_iter().enumerate() {
            let kind = EdgeKind::parse(&kind).ok_or_else(|| {
                Error::Validation(format!(
                    "{source}: edge #{i} ({src}, {dst}) has unknown kind `{kind}`"
                ))
            })?;
            edges.push(Edge {
                src,
                dst,
                kind,
                weight,
            });
        }
        MemoryGraph::from_parts(file.clues, file.utterances, edges, file.params)
            .map_err(|e| e.context(source.to_string()))
    }
}

pub fn save_graph(graph: &MemoryGraph, path: &Path) -> Result<()> {
    std::fs::write(path, graph.to_canonical_json()).map_err(|e| Error::io(path, e))
}

pub fn load_graph(path: &Path) -> Result<MemoryGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MemoryGraph::from_json(&text, &path.display().to_string())
}
