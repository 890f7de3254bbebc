use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use assomem::fusion::FusionConfig;
use assomem::graph::GraphConfig;
use assomem::providers::ProviderConfig;
use assomem::ranker::RankerConfig;
use assomem::retrieval::RetrievalConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Providers {
    pub embedding: ProviderConfig,
    pub clue: ProviderConfig,
    pub temporal: ProviderConfig,
    pub answer: ProviderConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub bank: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub provider: Providers,
    pub graph: GraphConfig,
    pub ranker: RankerConfig,
    pub fusion: FusionConfig,
    pub retrieval: RetrievalConfig,
    pub paths: Paths,
}

impl AppConfig {
    /// Defaults, overlaid with the JSON file, overlaid with `key=value`
    /// overrides. Keys that the defaults do not have are rejected by name.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<AppConfig> {
        let mut tree = serde_json::to_value(AppConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let layer: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut tree, layer, "")?;
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got `{item}`"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set(&mut tree, key, value)?;
        }
        let config: AppConfig = serde_json::from_value(tree).context("invalid configuration")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("provider.embedding", &self.provider.embedding),
            ("provider.clue", &self.provider.clue),
            ("provider.temporal", &self.provider.temporal),
            ("provider.answer", &self.provider.answer),
        ] {
            p.validate(name)?;
        }
        self.graph.validate()?;
        self.ranker.validate()?;
        self.fusion.validate()?;
        self.retrieval.validate()?;
        Ok(())
    }
}

fn merge(base: &mut Value, layer: Value, prefix: &str) -> Result<()> {
    let Value::Object(layer) = layer else {
        *base = layer;
        return Ok(());
    };
    let Value::Object(base) = base else {
        bail!("config key `{prefix}` is not a section");
    };
    for (key, value) in layer {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let slot = base.get_mut(&key).ok_or_else(|| anyhow!("unknown config key `{path}`"))?;
        if slot.is_null() || !value.is_object() {
            *slot = value;
        } else {
            merge(slot, value, &path)?;
        }
    }
    Ok(())
}

fn set(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut nested = value;
    for part in key.rsplit('.') {
        if part.is_empty() {
            bail!("malformed config key `{key}`");
        }
        nested = Value::Object(Map::from_iter([(part.to_string(), nested)]));
    }
    merge(tree, nested, "")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, body: &str) -> PathBuf {
        let path = dir.path().join("config.json");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn defaults_round_trip() {
        assert_eq!(AppConfig::resolve(None, &[]).unwrap(), AppConfig::default());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, r#"{"graph": {"gamma": 0.7}, "retrieval": {"k_clues": 4}}"#);
        let c = AppConfig::resolve(Some(&path), &["retrieval.k_clues=7".into()]).unwrap();
        assert_eq!(c.graph.gamma, 0.7);
        assert_eq!(c.retrieval.k_clues, 7);
        assert_eq!(c.graph.delta, GraphConfig::default().delta);
    }

    #[test]
    fn strings_and_paths() {
        let c = AppConfig::resolve(
            None,
            &["provider.embedding.kind=http".into(), "provider.embedding.endpoint=http://localhost:9/embed".into(), "paths.graph=g.json".into()],
        )
        .unwrap();
        assert_eq!(c.provider.embedding.endpoint.as_deref(), Some("http://localhost:9/embed"));
        assert_eq!(c.paths.graph.as_deref(), Some(Path::new("g.json")));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = AppConfig::resolve(None, &["graph.detla=0.5".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("graph.detla"), "{err:#}");
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, r#"{"rankr": {}}"#);
        let err = AppConfig::resolve(Some(&path), &[]).unwrap_err();
        assert!(format!("{err:#}").contains("rankr"), "{err:#}");
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for bad in ["graph.gamma=1.5", "fusion.T=0", "retrieval.k_evidence=0", "ranker.ppr.d=1.0"] {
            let err = AppConfig::resolve(None, &[bad.into()]).unwrap_err();
            let key = bad.split('=').next().unwrap().rsplit('.').next().unwrap();
            assert!(format!("{err:#}").contains(key), "{bad}: {err:#}");
        }
        assert!(AppConfig::resolve(None, &["novalue".into()]).is_err());
    }
}
