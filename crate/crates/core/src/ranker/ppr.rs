use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeIndex;

pub const DEFAULT_DAMPING: f64 = 0.85;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeWeighting {
    /// Every edge counts 1 before column normalization.
    #[default]
    Binary,
    /// Edges carry their stored weight (cosine for similarity edges, 1 for ownership).
    Cosine,
}

impl std::str::FromStr for EdgeWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(EdgeWeighting::Binary),
            "cosine" => Ok(EdgeWeighting::Cosine),
            other => Err(Error::Config(format!(
                "ranker.ppr.edge_weighting must be `binary` or `cosine`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PprParams {
    pub d: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub edge_weighting: EdgeWeighting,
}

impl Default for PprParams {
    fn default() -> Self {
        PprParams {
            d: DEFAULT_DAMPING,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            edge_weighting: EdgeWeighting::Binary,
        }
    }
}

impl PprParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0 && self.d < 1.0) {
            return Err(Error::Config(format!("ranker.ppr.d must be in (0, 1), got {}", self.d)));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("ranker.ppr.tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("ranker.ppr.max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Column-stochastic walk over an undirected weighted graph, stored as
/// per-node incoming transitions.
#[derive(Debug, Clone)]
pub struct WalkMatrix {
    /// For node i: (j, W[i][j]) over neighbours j, ascending.
    incoming: Vec<Vec<(usize, f64)>>,
    dangling: Vec<usize>,
}

impl WalkMatrix {
    /// `adjacency[j]` lists (neighbour, weight) pairs of node j; it must be
    /// symmetric. Nodes without neighbours are dangling.
    pub fn from_adjacency(adjacency: &[Vec<(usize, f64)>], weighting: EdgeWeighting) -> Result<Self> {
        let n = adjacency.len();
        let weight = |w: f64| match weighting {
            EdgeWeighting::Binary => 1.0,
            EdgeWeighting::Cosine => w,
        };
        let mut out_mass = vec![0.0; n];
        for (j, row) in adjacency.iter().enumerate() {
            for &(i, w) in row {
                if i >= n || i == j {
                    return Err(Error::Argument(format!("bad neighbour {i} of node {j}")));
                }
                if !(w > 0.0 && w.is_finite()) {
                    return Err(Error::Argument(format!("edge ({j}, {i}) has weight {w}")));
                }
                out_mass[j] += weight(w);
            }
        }
        // Undirected: node i's incoming neighbours are its adjacency row.
        let incoming = adjacency
            .iter()
            .map(|row| row.iter().map(|&(j, w)| (j, weight(w) / out_mass[j])).collect())
            .collect();
        let dangling = (0..n).filter(|&j| adjacency[j].is_empty()).collect();
        Ok(WalkMatrix { incoming, dangling })
    }

    pub fn from_index(index: &NodeIndex, weighting: EdgeWeighting) -> Result<Self> {
        let adjacency: Vec<Vec<(usize, f64)>> =
            (0..index.len()).map(|p| index.neighbours(p).to_vec()).collect();
        Self::from_adjacency(&adjacency, weighting)
    }

    pub fn len(&self) -> usize {
        self.incoming.len()
    }

    pub fn is_empty(&self) -> bool {
        self.incoming.is_empty()
    }

    /// Entry W[i][j]; dangling columns equal `teleport`.
    pub fn entry(&self, i: usize, j: usize, teleport: &[f64]) -> f64 {
        if self.dangling.binary_search(&j).is_ok() {
            return teleport[i];
        }
        self.incoming[i]
            .iter()
            .find(|(k, _)| *k == j)
            .map_or(0.0, |(_, w)| *w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PprOutcome {
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration r <- d W r + (1 - d) t from r = t. Stops once the L1 change
/// drops below `tol`; otherwise returns the last iterate unconverged.
pub fn personalized_pagerank(walk: &WalkMatrix, teleport: &[f64], params: &PprParams) -> Result<PprOutcome> {
    params.validate()?;
    let n = walk.len();
    if teleport.len() != n {
        return Err(Error::Argument(format!(
            "teleport vector has {} entries for {n} nodes",
            teleport.len()
        )));
    }
    if teleport.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Argument("teleport entries must be finite and non-negative".into()));
    }
    let d = params.d;
    let mut r = teleport.to_vec();
    let mut next = vec![0.0; n];
    for iteration in 1..=params.max_iter {
        let dangling_mass: f64 = walk.dangling.iter().map(|&j| r[j]).sum();
        let restart = d * dangling_mass + (1.0 - d);
        let mut delta = 0.0;
        for i in 0..n {
            let walked: f64 = walk.incoming[i].iter().map(|&(j, w)| w * r[j]).sum();
            next[i] = d * walked + restart * teleport[i];
            delta += (next[i] - r[i]).abs();
        }
        std::mem::swap(&mut r, &mut next);
        if delta < params.tol {
            return Ok(PprOutcome {
                scores: r,
                iterations: iteration,
                converged: true,
            });
        }
    }
    Ok(PprOutcome {
        scores: r,
        iterations: params.max_iter,
        converged: false,
    })
}

/// Non-personalized PageRank: uniform teleportation over every node.
#[cfg(any(test, feature = "global-pagerank"))]
pub fn global_pagerank(walk: &WalkMatrix, params: &PprParams) -> Result<PprOutcome> {
    let n = walk.len();
    personalized_pagerank(walk, &vec![1.0 / n as f64; n], params)
}
