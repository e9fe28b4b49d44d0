//! Run configuration as flat dotted keys.
//!
//! A config file is a single JSON object such as
//! `{"train.epochs": 5, "train.model.counterfactual_mode": "shuffle"}`. Values are layered
//! defaults < file < overrides, and every key is validated against the defaults so
//! typos are rejected up front.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CdalError, Result};
use crate::eval::EvalConfig;
use crate::rng;
use crate::synth::DatasetConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Sub-config seeds that always follow the top-level `seed`.
const DERIVED: [&str; 2] = ["data.seed", "train.seed"];

const DOCS: &[(&str, &str)] = &[
    ("seed", "single source of randomness for data, training and evaluation"),
    ("out", "output directory; every command writes only below it"),
    ("data.height", "image height in pixels (multiple of 4)"),
    ("data.width", "image width in pixels (multiple of 4)"),
    ("data.known_generators", "generator ids seen with labels during training"),
    ("data.novel_generators", "generator ids only present in the unlabeled split"),
    ("data.samples_per_class", "images per generator in each split"),
    ("data.identities", "number of shared source identities"),
    ("data.sensor_noise", "std of i.i.d. pixel noise"),
    ("data.artifact_scale", "multiplier on every generator fingerprint amplitude"),
    ("train.epochs", "passes over the labeled split"),
    ("train.batch_size", "samples per optimizer step"),
    ("train.learning_rate", "SGD step size"),
    ("train.momentum", "SGD momentum coefficient"),
    ("train.grad_clip", "max global L2 norm of each batch gradient (0 disables)"),
    ("train.loss.eta1", "weight of the causal-effect loss"),
    ("train.loss.eta2", "weight of the counterfactual decorrelation loss"),
    ("train.loss.eta3", "weight of the augmentation consistency loss"),
    ("train.model.n_experts", "experts per CE convolution"),
    ("train.model.n_maps", "attention maps per branch (even)"),
    ("train.model.counterfactual_mode", "learned | random | uniform | reversed | shuffle"),
    ("train.model.cdal_enabled", "train the attention branches with the CDAL losses"),
    ("train.model.vanilla_attention_mode", "factual attention only, no counterfactual path or CDAL losses"),
    ("train.aug.noise_sigma", "std of additive noise in the augmentation chain"),
    ("train.aug.blur_passes", "3x3 box-blur passes in the augmentation chain"),
    ("train.aug.scale_range", "[lo, hi] range of the global intensity scale"),
    ("eval.kmeans_restarts", "k-means++ restarts for novel-class discovery"),
    ("eval.standardize", "z-score embeddings before clustering"),
];

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("object");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl RunConfig {
    /// Every user-settable key with its current value.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("serializable"), &mut flat);
        for d in DERIVED {
            flat.remove(d);
        }
        flat
    }

    fn from_flat(mut flat: BTreeMap<String, Value>) -> Result<Self> {
        let seed = flat.get("seed").cloned().unwrap_or(Value::from(0));
        for d in DERIVED {
            flat.insert(d.to_string(), seed.clone());
        }
        let cfg: RunConfig =
            serde_json::from_value(unflatten(&flat)).map_err(|e| CdalError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `overrides` on top of `self`; unknown keys are an error.
    pub fn with_overrides(&self, overrides: &BTreeMap<String, Value>) -> Result<Self> {
        let mut flat = self.to_flat();
        for (k, v) in overrides {
            match flat.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(CdalError::Config(format!("unknown config key `{k}`"))),
            }
        }
        Self::from_flat(flat)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| CdalError::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(m) = v else {
            return Err(CdalError::Config("config must be a JSON object of dotted keys".into()));
        };
        RunConfig::default().with_overrides(&m.into_iter().collect())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CdalError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn to_json_pretty(&self) -> String {
        let flat: Map<String, Value> = self.to_flat().into_iter().collect();
        serde_json::to_string_pretty(&Value::Object(flat)).expect("serializable")
    }

    /// Digest of everything except the output directory.
    pub fn digest(&self) -> String {
        let mut flat = self.to_flat();
        flat.remove("out");
        rng::digest(serde_json::to_string(&flat).expect("serializable").as_bytes())
    }

    pub fn doc(key: &str) -> Option<&'static str> {
        DOCS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d)
    }

    /// One line per key: name, default, description.
    pub fn help_table() -> String {
        let mut out = String::new();
        for (k, v) in RunConfig::default().to_flat() {
            out.push_str(&format!("  {k:<36} {:<14} {}\n", v.to_string(), Self::doc(&k).unwrap_or("")));
        }
        out
    }
}

/// Parses a `key=value` override; the value is JSON when it parses as JSON and a
/// plain string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CdalError::Config(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}
