//! Experiment configuration: preset defaults, then a JSON file, then
//! `UNMT_*` environment variables, then command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::{EmbeddingConfig, TOY_MERGES, TOY_SEED_PAIRS};
use crate::toylang::ToyLangSpec;
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "UNMT_";
/// Environment variables with the prefix that are not config keys.
const ENV_RESERVED: &[&str] = &["UNMT_LOG"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub embeddings: EmbeddingConfig,
    pub toy: ToyLangSpec,
    pub bpe_merges: usize,
    /// Size of the seed dictionary drawn from a gold dictionary.
    pub seed_pairs: usize,
    pub lowercase: bool,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        let mut embeddings = EmbeddingConfig::default();
        embeddings.skipgram.dim = model.dim;
        Self {
            model,
            train: TrainConfig::desk(),
            embeddings,
            toy: ToyLangSpec::default(),
            bpe_merges: TOY_MERGES,
            seed_pairs: TOY_SEED_PAIRS,
            lowercase: false,
        }
    }

    pub fn paper() -> Self {
        let model = ModelConfig::paper();
        let mut embeddings = EmbeddingConfig::default();
        embeddings.skipgram.dim = model.dim;
        Self {
            model,
            train: TrainConfig::paper(),
            embeddings,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.embeddings.skipgram.validate()?;
        self.toy.validate()?;
        if self.embeddings.skipgram.dim != self.model.dim {
            return Err(Error::invalid(format!(
                "embeddings.skipgram.dim ({}) must equal model.dim ({})",
                self.embeddings.skipgram.dim, self.model.dim
            )));
        }
        Ok(())
    }

    /// One seed for every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.embeddings.skipgram.seed = seed;
        self.toy.seed = seed;
    }

    /// Resolves the layered configuration. `file` and `env` are applied in
    /// that order over the preset; unknown keys are errors.
    pub fn resolve<I>(paper_preset: bool, file: Option<&Path>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let base = if paper_preset { Self::paper() } else { Self::desk() };
        let mut doc = serde_json::to_value(&base)?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: Value = serde_json::from_str(&text)?;
            merge(&mut doc, user, "")?;
        }
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && !ENV_RESERVED.contains(&k.as_str()))
            .collect();
        env.sort();
        for (k, v) in env {
            apply_env(&mut doc, &k[ENV_PREFIX.len()..], &v)?;
        }
        let config: Self = serde_json::from_value(doc)?;
        Ok(config)
    }
}

/// Deep-merges `user` into `base`. Objects merge key by key and must only
/// name existing keys; anything else replaces the base value.
fn merge(base: &mut Value, user: Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) if is_struct(b) => {
            for (k, v) in u {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| Error::invalid(format!("unknown config key `{here}`")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (slot, u) => {
            *slot = u;
            Ok(())
        }
    }
}

/// Externally tagged enum values (`{"beam": 4}`) are replaced, not merged.
fn is_struct(m: &Map<String, Value>) -> bool {
    !(m.len() == 1 && m.contains_key("beam"))
}

fn leaf_paths(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    match v {
        Value::Object(m) if is_struct(m) => {
            for (k, child) in m {
                prefix.push(k.clone());
                leaf_paths(child, prefix, out);
                prefix.pop();
            }
        }
        _ => out.push(prefix.clone()),
    }
}

/// `KEY` names a leaf either fully qualified with `__` between levels
/// (`TRAIN__LR`) or by its unique last component (`LR`).
fn apply_env(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let wanted: Vec<String> = key.to_ascii_lowercase().split("__").map(str::to_string).collect();
    let mut leaves = Vec::new();
    leaf_paths(doc, &mut Vec::new(), &mut leaves);
    let matches: Vec<&Vec<String>> = leaves.iter().filter(|p| p.ends_with(&wanted)).collect();
    let path = match matches.as_slice() {
        [one] => (*one).clone(),
        [] => return Err(Error::invalid(format!("{ENV_PREFIX}{key} does not name a config key"))),
        many => {
            let names: Vec<String> = many.iter().map(|p| p.join("__").to_ascii_uppercase()).collect();
            return Err(Error::invalid(format!(
                "{ENV_PREFIX}{key} is ambiguous; use one of {}",
                names.iter().map(|n| format!("{ENV_PREFIX}{n}")).collect::<Vec<_>>().join(", ")
            )));
        }
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for k in &path {
        slot = slot.get_mut(k).expect("path from leaf enumeration");
    }
    *slot = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn env_overrides_by_short_and_qualified_name() {
        let c = ExperimentConfig::resolve(false, None, env(&[("UNMT_LR", "0.01"), ("UNMT_MODEL__LAYERS", "3")])).unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.model.layers, 3);
        let c = ExperimentConfig::resolve(false, None, env(&[("UNMT_BT_STRATEGY", "{\"beam\":3}")])).unwrap();
        assert_eq!(c.train.bt_strategy, crate::model::Strategy::Beam(3));
    }

    #[test]
    fn ambiguous_and_unknown_env_keys_fail() {
        let e = ExperimentConfig::resolve(false, None, env(&[("UNMT_SEED", "3")])).unwrap_err();
        assert!(e.to_string().contains("ambiguous"), "{e}");
        assert!(ExperimentConfig::resolve(false, None, env(&[("UNMT_BOGUS", "1")])).is_err());
        assert!(ExperimentConfig::resolve(false, None, env(&[("UNMT_LOG", "debug")])).is_ok());
    }

    #[test]
    fn file_merges_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"patience": 2}, "model": {"dropout": 0.0}}"#).unwrap();
        let c = ExperimentConfig::resolve(false, Some(&p), Vec::new()).unwrap();
        assert_eq!(c.train.patience, 2);
        assert_eq!(c.model.dropout, 0.0);
        assert_eq!(c.train.lr, TrainConfig::desk().lr);
        std::fs::write(&p, r#"{"train": {"patiense": 2}}"#).unwrap();
        let e = ExperimentConfig::resolve(false, Some(&p), Vec::new()).unwrap_err();
        assert!(e.to_string().contains("train.patiense"), "{e}");
    }

    #[test]
    fn presets_validate() {
        ExperimentConfig::desk().validate().unwrap();
        ExperimentConfig::paper().validate().unwrap();
        assert_eq!(ExperimentConfig::paper().train.lr, 1e-4);
    }
}
