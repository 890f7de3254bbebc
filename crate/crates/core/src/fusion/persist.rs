use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{BinEdges, Contingency, Dimension, DimensionModel, FusionModel, StratumModel, GLOBAL_STRATUM};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

type PerStratum<T> = BTreeMap<String, BTreeMap<Dimension, T>>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema: u32,
    #[serde(rename = "T")]
    temperature: f64,
    alpha: f64,
    bins: PerStratum<BinEdges>,
    /// `null` marks a dimension without training data in that stratum.
    cmi: PerStratum<Option<f64>>,
    counts: PerStratum<Contingency>,
}

impl FusionModel {
    pub fn to_canonical_json(&self) -> String {
        let mut file = ModelFile {
            schema: MODEL_SCHEMA_VERSION,
            temperature: self.temperature,
            alpha: self.alpha,
            bins: BTreeMap::new(),
            cmi: BTreeMap::new(),
            counts: BTreeMap::new(),
        };
        for (name, stratum) in &self.strata {
            for d in Dimension::ALL {
                let model = stratum.get(d);
                file.cmi.entry(name.clone()).or_default().insert(d, model.map(|m| m.cmi));
                if let Some(m) = model {
                    file.bins.entry(name.clone()).or_default().insert(d, m.edges);
                    file.counts.entry(name.clone()).or_default().insert(d, m.counts);
                }
            }
        }
        let mut json = serde_json::to_string_pretty(&file).expect("model serialization is infallible");
        json.push('\n');
        json
    }

    pub fn from_json(text: &str, source: &str) -> Result<FusionModel> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::format(source, &e))?;
        let invalid = |msg: String| Error::Validation(format!("{source}: {msg}"));
        if file.schema != MODEL_SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported model schema {} (expected {MODEL_SCHEMA_VERSION})",
                file.schema
            )));
        }
        if !(file.temperature > 0.0 && file.temperature.is_finite()) {
            return Err(invalid(format!("T must be positive, got {}", file.temperature)));
        }
        if !(file.alpha >= 0.0 && file.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be non-negative, got {}", file.alpha)));
        }
        let mut strata = BTreeMap::new();
        for (name, cmis) in &file.cmi {
            if name != GLOBAL_STRATUM && crate::corpus::QuestionType::parse(name).as_str() != name {
                return Err(invalid(format!("unknown stratum `{name}`")));
            }
            let mut dims: BTreeMap<Dimension, DimensionModel> = BTreeMap::new();
            for d in Dimension::ALL {
                let cmi = cmis
                    .get(&d)
                    .ok_or_else(|| invalid(format!("stratum `{name}` lacks a cmi entry for {d}")))?;
                let edges = file.bins.get(name).and_then(|m| m.get(&d));
                let counts = file.counts.get(name).and_then(|m| m.get(&d));
                match (cmi, edges, counts) {
                    (Some(cmi), Some(edges), Some(counts)) => {
                        if !(*cmi >= 0.0 && cmi.is_finite()) {
                            return Err(invalid(format!("stratum `{name}` has cmi {cmi} for {d}")));
                        }
                        dims.insert(
                            d,
                            DimensionModel {
                                edges: *edges,
                                counts: *counts,
                                cmi: *cmi,
                            },
                        );
                    }
                    (None, None, None) if d == Dimension::Temp => {}
                    _ => {
                        return Err(invalid(format!(
                            "stratum `{name}` has inconsistent bins/cmi/counts for {d}"
                        )))
                    }
                }
            }
            let mut take = |d: Dimension| {
                dims.remove(&d)
                    .ok_or_else(|| invalid(format!("stratum `{name}` has no model for {d}")))
            };
            strata.insert(
                name.clone(),
                StratumModel {
                    rel: take(Dimension::Rel)?,
                    imp: take(Dimension::Imp)?,
                    temp: take(Dimension::Temp).ok(),
                },
            );
        }
        for extra in file.bins.keys().chain(file.counts.keys()) {
            if !strata.contains_key(extra) {
                return Err(invalid(format!("stratum `{extra}` has bins or counts but no cmi")));
            }
        }
        Ok(FusionModel {
            temperature: file.temperature,
            alpha: file.alpha,
            strata,
        })
    }
}

pub fn save_model(model: &FusionModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_canonical_json()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<FusionModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    FusionModel::from_json(&text, &path.display().to_string())
}
