//! Per-question-type fusion weights from conditional mutual information
//! between binned dimension scores and usefulness labels.

mod persist;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::QuestionType;
use crate::error::{Error, Result};
use crate::ranker::DimensionScores;

pub use persist::{load_model, save_model, MODEL_SCHEMA_VERSION};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Stratum pooling every training record; used for unseen question types.
pub const GLOBAL_STRATUM: &str = "global";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Rel,
    Imp,
    Temp,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Rel, Dimension::Imp, Dimension::Temp];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Rel => "rel",
            Dimension::Imp => "imp",
            Dimension::Temp => "temp",
        }
    }

    pub fn parse(s: &str) -> Option<Dimension> {
        Dimension::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bin {
    Low,
    Medium,
    High,
}

impl Bin {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Min-max normalized scores of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedScores {
    pub utterance_id: String,
    pub rel: f64,
    pub imp: f64,
    pub temp: Option<f64>,
}

impl NormalizedScores {
    pub fn get(&self, d: Dimension) -> Option<f64> {
        match d {
            Dimension::Rel => Some(self.rel),
            Dimension::Imp => Some(self.imp),
            Dimension::Temp => self.temp,
        }
    }
}

fn min_max(values: impl Iterator<Item = f64> + Clone) -> impl Fn(f64) -> f64 {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    move |x| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 }
}

/// Rescales each dimension to [0, 1] over the candidate set; a constant
/// dimension maps to 0.5.
pub fn normalize_scores(scores: &[DimensionScores]) -> Vec<NormalizedScores> {
    let rel = min_max(scores.iter().map(|s| s.s_rel));
    let imp = min_max(scores.iter().map(|s| s.s_imp));
    let temp = min_max(scores.iter().filter_map(|s| s.s_temp));
    scores
        .iter()
        .map(|s| NormalizedScores {
            utterance_id: s.utterance_id.clone(),
            rel: rel(s.s_rel),
            imp: imp(s.s_imp),
            temp: s.s_temp.map(&temp),
        })
        .collect()
}

/// Two strictly increasing cut points splitting [0, 1] into three bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct BinEdges {
    lower: f64,
    upper: f64,
}

impl TryFrom<[f64; 2]> for BinEdges {
    type Error = Error;

    fn try_from([lower, upper]: [f64; 2]) -> Result<Self> {
        BinEdges::new(lower, upper)
    }
}

impl From<BinEdges> for [f64; 2] {
    fn from(e: BinEdges) -> Self {
        [e.lower, e.upper]
    }
}

impl BinEdges {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::Validation(format!(
                "bin edges must be finite and strictly increasing, got ({lower}, {upper})"
            )));
        }
        Ok(BinEdges { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    /// Tertile cut points of `values`. Each cut sits midway between the
    /// sorted values on either side of a third, so tied values all land in
    /// the upper bin. A collapsed upper cut is nudged just above the lower.
    pub fn tertiles(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("tertiles of an empty score list".into()));
        }
        let mut xs = values.to_vec();
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        let cut = |k: usize| {
            if n == 1 {
                return xs[0];
            }
            let i = ((k * n) as f64 / 3.0).round() as usize;
            let i = i.clamp(1, n - 1);
            (xs[i - 1] + xs[i]) / 2.0
        };
        let lower = cut(1);
        let mut upper = cut(2);
        if upper <= lower {
            upper = lower.next_up();
        }
        BinEdges::new(lower, upper)
    }

    pub fn bin(&self, x: f64) -> Bin {
        if x < self.lower {
            Bin::Low
        } else if x < self.upper {
            Bin::Medium
        } else {
            Bin::High
        }
    }
}

pub fn bin_score(x: f64, edges: &BinEdges) -> Bin {
    edges.bin(x)
}

/// Bin-by-label counts: rows low/medium/high, columns label 0/1.
pub type Contingency = [[u64; 2]; 3];

/// Plug-in mutual information (nats) of a 3x2 table under add-`alpha`
/// smoothing of every cell.
pub fn cmi_from_counts(counts: &Contingency, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Argument(format!("smoothing must be non-negative, got {alpha}")));
    }
    let cells: Vec<f64> = counts.iter().flatten().map(|&n| n as f64 + alpha).collect();
    let total: f64 = cells.iter().sum();
    if total <= 0.0 {
        return Err(Error::Fit("empty contingency table with no smoothing".into()));
    }
    let p = |b: usize, l: usize| cells[b * 2 + l] / total;
    let p_bin = |b: usize| p(b, 0) + p(b, 1);
    let p_label = |l: usize| (0..3).map(|b| p(b, l)).sum::<f64>();
    let mut mi = 0.0;
    for b in 0..3 {
        for l in 0..2 {
            let joint = p(b, l);
            if joint > 0.0 {
                mi += joint * (joint / (p_bin(b) * p_label(l))).ln();
            }
        }
    }
    // Rounding can leave a tiny negative for independent tables.
    Ok(mi.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DimensionModel {
    pub edges: BinEdges,
    pub counts: Contingency,
    pub cmi: f64,
}

/// Fitted models for one stratum; `temp` is `None` when no training record
/// in the stratum had a temporal expression.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumModel {
    pub rel: DimensionModel,
    pub imp: DimensionModel,
    pub temp: Option<DimensionModel>,
}

impl StratumModel {
    pub fn get(&self, d: Dimension) -> Option<&DimensionModel> {
        match d {
            Dimension::Rel => Some(&self.rel),
            Dimension::Imp => Some(&self.imp),
            Dimension::Temp => self.temp.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub temperature: f64,
    pub alpha: f64,
    /// Keyed by question type name, plus [`GLOBAL_STRATUM`].
    pub strata: BTreeMap<String, StratumModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query_type: QuestionType,
    pub scores: Vec<DimensionScores>,
    /// Usefulness label per entry of `scores`.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(rename = "T")]
    pub temperature: f64,
    pub alpha: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            temperature: DEFAULT_TEMPERATURE,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "fusion.T must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "fusion.alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn fit_dimension(
    samples: &[(f64, u8)],
    alpha: f64,
    stratum: &str,
    dim: Dimension,
) -> Result<DimensionModel> {
    let values: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let edges = BinEdges::tertiles(&values)?;
    let mut counts = [[0u64; 2]; 3];
    for &(x, label) in samples {
        counts[edges.bin(x).index()][usize::from(label)] += 1;
    }
    let positives: u64 = counts.iter().map(|r| r[1]).sum();
    if alpha == 0.0 && (positives == 0 || positives == samples.len() as u64) {
        return Err(Error::Fit(format!(
            "stratum `{stratum}` ({dim}) has only {} labels; smoothing (alpha > 0) is required",
            if positives == 0 { "negative" } else { "positive" }
        )));
    }
    let cmi = cmi_from_counts(&counts, alpha)?;
    Ok(DimensionModel { edges, counts, cmi })
}

fn fit_stratum(examples: &[&TrainingExample], alpha: f64, name: &str) -> Result<StratumModel> {
    let mut pooled: [Vec<(f64, u8)>; 3] = Default::default();
    for ex in examples {
        for (s, &label) in normalize_scores(&ex.scores).iter().zip(&ex.labels) {
            for d in Dimension::ALL {
                if let Some(x) = s.get(d) {
                    pooled[d as usize].push((x, label));
                }
            }
        }
    }
    let temp = if pooled[2].is_empty() {
        None
    } else {
        Some(fit_dimension(&pooled[2], alpha, name, Dimension::Temp)?)
    };
    Ok(StratumModel {
        rel: fit_dimension(&pooled[0], alpha, name, Dimension::Rel)?,
        imp: fit_dimension(&pooled[1], alpha, name, Dimension::Imp)?,
        temp,
    })
}

/// Fits bins, contingency counts and CMI per question type and for the
/// pooled global stratum. Records of unknown type only feed the global one.
pub fn fit_fusion(training: &[TrainingExample], config: &FusionConfig) -> Result<FusionModel> {
    config.validate()?;
    if training.is_empty() {
        return Err(Error::Fit("no training examples".into()));
    }
    for (i, ex) in training.iter().enumerate() {
        if ex.scores.is_empty() {
            return Err(Error::Fit(format!("training example #{i} has no candidates")));
        }
        if ex.scores.len() != ex.labels.len() {
            return Err(Error::Fit(format!(
                "training example #{i} has {} candidates but {} labels",
                ex.scores.len(),
                ex.labels.len()
            )));
        }
        if ex.labels.iter().any(|&l| l > 1) {
            return Err(Error::Fit(format!("training example #{i} has a label other than 0/1")));
        }
    }
    let mut by_type: BTreeMap<QuestionType, Vec<&TrainingExample>> = BTreeMap::new();
    for ex in training {
        if ex.query_type != QuestionType::Unknown {
            by_type.entry(ex.query_type).or_default().push(ex);
        }
    }
    let mut strata = BTreeMap::new();
    let all: Vec<&TrainingExample> = training.iter().collect();
    strata.insert(GLOBAL_STRATUM.to_string(), fit_stratum(&all, config.alpha, GLOBAL_STRATUM)?);
    for (qt, examples) in by_type {
        strata.insert(qt.as_str().to_string(), fit_stratum(&examples, config.alpha, qt.as_str())?);
    }
    Ok(FusionModel {
        temperature: config.temperature,
        alpha: config.alpha,
        strata,
    })
}

/// Fusion weights; `temp` is `None` when the temporal dimension is inactive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub rel: f64,
    pub imp: f64,
    pub temp: Option<f64>,
}

impl Weights {
    pub fn get(&self, d: Dimension) -> Option<f64> {
        match d {
            Dimension::Rel => Some(self.rel),
            Dimension::Imp => Some(self.imp),
            Dimension::Temp => self.temp,
        }
    }
}

/// Temperature softmax, shifted by the maximum for stability.
pub fn softmax(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

impl FusionModel {
    /// Equal weights for every query; for use without training data.
    pub fn uniform() -> FusionModel {
        FusionModel {
            temperature: DEFAULT_TEMPERATURE,
            alpha: DEFAULT_ALPHA,
            strata: BTreeMap::new(),
        }
    }

    /// The stratum for a query type, falling back to the global one.
    pub fn stratum(&self, query_type: QuestionType) -> Option<&StratumModel> {
        self.strata
            .get(query_type.as_str())
            .or_else(|| self.strata.get(GLOBAL_STRATUM))
    }

    /// CMI triple used for weighting. A stratum lacking temporal training
    /// data borrows the global temporal CMI, or 0 if that is missing too.
    pub fn cmi(&self, query_type: QuestionType) -> [f64; 3] {
        let Some(s) = self.stratum(query_type) else {
            return [0.0; 3];
        };
        let temp = s
            .temp
            .as_ref()
            .or_else(|| self.strata.get(GLOBAL_STRATUM).and_then(|g| g.temp.as_ref()))
            .map_or(0.0, |m| m.cmi);
        [s.rel.cmi, s.imp.cmi, temp]
    }
}

pub fn fusion_weights(model: &FusionModel, query_type: QuestionType, temporal_applicable: bool) -> Weights {
    let cmi = model.cmi(query_type);
    if temporal_applicable {
        let w = softmax(&cmi, model.temperature);
        Weights {
            rel: w[0],
            imp: w[1],
            temp: Some(w[2]),
        }
    } else {
        let w = softmax(&cmi[..2], model.temperature);
        Weights {
            rel: w[0],
            imp: w[1],
            temp: None,
        }
    }
}

/// Weighted sum of the active dimensions.
pub fn fuse(scores: &NormalizedScores, weights: &Weights) -> Result<f64> {
    match (scores.temp, weights.temp) {
        (Some(s), Some(w)) => Ok(weights.rel * scores.rel + weights.imp * scores.imp + w * s),
        (None, None) => Ok(weights.rel * scores.rel + weights.imp * scores.imp),
        _ => Err(Error::Argument(format!(
            "temporal dimension active in {} but not in {}",
            if scores.temp.is_some() { "scores" } else { "weights" },
            if scores.temp.is_some() { "weights" } else { "scores" },
        ))),
    }
}
