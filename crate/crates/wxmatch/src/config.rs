//! Experiment configuration files.
//!
//! A config is JSON. Keys left out take the defaults of the chosen profile;
//! unknown keys are rejected with their path. The `paper` profile pins the
//! published training setup and refuses overrides of those values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use wxmatch_core::degrade::WeatherSpec;
use wxmatch_core::model::ModelConfig;
use wxmatch_core::train::{AdaptConfig, TrainConfig};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    #[default]
    Desk,
}

/// A generated dataset: weather spec, pair count and generation seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub spec: WeatherSpec,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Datasets {
    /// Single-condition tasks seen during meta-training.
    pub meta_train: Vec<DatasetSpec>,
    /// The unseen condition used for adaptation and evaluation.
    pub target: DatasetSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub datasets: Datasets,
    pub output_dir: PathBuf,
    /// Run seeds; each drives initialization, episode sampling and adaptation.
    pub seeds: Vec<u64>,
    /// Support-set size at meta-test time.
    pub shots: usize,
    /// Number of evaluation queries taken from the target dataset.
    pub eval_queries: usize,
}

/// Paths fixed by the `paper` profile.
const PAPER_LOCKED: &[&str] = &[
    "model.input_size",
    "model.heads",
    "train.iterations",
    "train.batch_size",
    "train.lr_encoder",
    "train.lr_other",
    "train.input_size",
    "adapt.iterations",
    "adapt.lr_bias",
];

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            adapt: AdaptConfig::desk(),
            datasets: Datasets {
                meta_train: vec![
                    DatasetSpec {
                        spec: WeatherSpec::rain(11),
                        count: 200,
                        seed: 1,
                    },
                    DatasetSpec {
                        spec: WeatherSpec::fog(12),
                        count: 200,
                        seed: 2,
                    },
                ],
                // Unseen: rain co-occurring with haze denser than any training fog.
                // 56 pairs: 6 in the support pool, 50 evaluation queries.
                target: DatasetSpec {
                    spec: WeatherSpec::rain_heavy_fog(13),
                    count: 56,
                    seed: 3,
                },
            },
            output_dir: PathBuf::from("runs/desk"),
            seeds: vec![0, 1, 2],
            shots: 1,
            eval_queries: 50,
        }
    }

    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
            adapt: AdaptConfig::paper(),
            output_dir: PathBuf::from("runs/paper"),
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Cross-field invariants; errors carry the field path.
    pub fn validate(&self) -> Result<()> {
        let prefixed = |section: &str, e: wxmatch_core::Error| match e {
            wxmatch_core::Error::Param(msg) => Error::Config(format!("{section}.{msg}")),
            other => Error::Config(format!("{section}: {other}")),
        };
        self.model.validate().map_err(|e| prefixed("model", e))?;
        self.train.validate().map_err(|e| prefixed("train", e))?;
        self.adapt.validate().map_err(|e| prefixed("adapt", e))?;
        if self.train.input_size != self.model.input_size {
            return Err(Error::Config(format!(
                "train.input_size: {} differs from model.input_size {}",
                self.train.input_size, self.model.input_size
            )));
        }
        if self.datasets.meta_train.is_empty() {
            return Err(Error::Config("datasets.meta_train: needs at least one dataset".into()));
        }
        let all = self.datasets.meta_train.iter().map(|d| ("datasets.meta_train", d));
        for (path, d) in all.chain([("datasets.target", &self.datasets.target)]) {
            d.spec
                .validate()
                .map_err(|e| Error::Config(format!("{path}.spec: {e}")))?;
            if d.count < 2 {
                return Err(Error::Config(format!(
                    "{path}.count: must be at least 2, got {}",
                    d.count
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: needs at least one seed".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots: must be at least 1".into()));
        }
        if self.eval_queries == 0 {
            return Err(Error::Config("eval_queries: must be at least 1".into()));
        }
        Ok(())
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_owned()
    } else {
        format!("{path}.{key}")
    }
}

/// Overlays `user` onto `base`, rejecting keys `base` lacks.
fn overlay(
    base: &mut Value,
    user: &Map<String, Value>,
    path: &str,
    overridden: &mut Vec<(String, Value)>,
) -> Result<()> {
    let base = base
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("{path}: expected a value, not an object")))?;
    for (k, v) in user {
        let p = join(path, k);
        let slot = base
            .get_mut(k)
            .ok_or_else(|| Error::Config(format!("{p}: unknown key")))?;
        match v {
            Value::Object(inner) if slot.is_object() => overlay(slot, inner, &p, overridden)?,
            _ => {
                if *slot != *v {
                    overridden.push((p, v.clone()));
                }
                *slot = v.clone();
            }
        }
    }
    Ok(())
}

fn section<T: serde::de::DeserializeOwned>(merged: &Value, key: &str) -> Result<T> {
    serde_json::from_value(merged[key].clone()).map_err(|e| Error::Config(format!("{key}: {e}")))
}

/// Parses config text. An empty document yields the desk defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let user = if text.trim().is_empty() {
        Map::new()
    } else {
        match serde_json::from_str::<Value>(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))? {
            Value::Object(m) => m,
            _ => return Err(Error::Config("top level must be a JSON object".into())),
        }
    };
    let profile = match user.get("profile") {
        None => Profile::Desk,
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
    };
    let mut merged = serde_json::to_value(ExperimentConfig::for_profile(profile))?;
    let mut overridden = Vec::new();
    overlay(&mut merged, &user, "", &mut overridden)?;
    if profile == Profile::Paper {
        if let Some((p, _)) = overridden
            .iter()
            .find(|(p, _)| PAPER_LOCKED.iter().any(|l| p == l || p.starts_with(&format!("{l}."))))
        {
            return Err(Error::Config(format!("{p}: locked by the paper profile")));
        }
    }
    let cfg = ExperimentConfig {
        profile,
        model: section(&merged, "model")?,
        train: section(&merged, "train")?,
        adapt: section(&merged, "adapt")?,
        datasets: section(&merged, "datasets")?,
        output_dir: section(&merged, "output_dir")?,
        seeds: section(&merged, "seeds")?,
        shots: section(&merged, "shots")?,
        eval_queries: section(&merged, "eval_queries")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
