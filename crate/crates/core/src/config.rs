//! Run configuration: one flat document of dotted keys (`train.lr = 1e-4`),
//! read as TOML, with `key=value` overrides applied on top.
//!
//! Every key has a default, so an empty document is a complete config.
//! Unknown keys are rejected with the list of valid ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backend::EmOptions;
use crate::corpus::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::{DcfParams, ProbeOptions};
use crate::mi::MiBenchConfig;
use crate::model::{BackboneScale, ModelConfig};
use crate::trainer::TrainConfig;

/// Model shape knobs a user sets; sizes that follow from the data (mel
/// bins, speaker counts) and the crop length are filled in at train time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub backbone_scale: BackboneScale,
    pub d_id: usize,
    pub d_dom: usize,
    pub grl_lambda: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            backbone_scale: m.backbone_scale,
            d_id: m.d_id,
            d_dom: m.d_dom,
            grl_lambda: m.grl_lambda,
        }
    }
}

impl ModelSection {
    pub fn base(&self) -> ModelConfig {
        ModelConfig {
            backbone_scale: self.backbone_scale,
            d_id: self.d_id,
            d_dom: self.d_dom,
            grl_lambda: self.grl_lambda,
            ..ModelConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendSection {
    /// LDA output size; clipped to `min(dim - 1, classes - 1)`.
    pub lda_dim: usize,
    pub em_min_iters: usize,
    pub em_max_iters: usize,
    pub em_tol: f64,
}

impl Default for BackendSection {
    fn default() -> Self {
        let em = EmOptions::default();
        Self {
            lda_dim: 32,
            em_min_iters: em.min_iters,
            em_max_iters: em.max_iters,
            em_tol: em.tol,
        }
    }
}

impl BackendSection {
    pub fn em(&self) -> EmOptions {
        EmOptions {
            min_iters: self.em_min_iters,
            max_iters: self.em_max_iters,
            tol: self.em_tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSection {
    pub n_target: usize,
    pub n_nontarget: usize,
    pub seed: u64,
}

impl Default for TrialSection {
    fn default() -> Self {
        Self {
            n_target: 1000,
            n_nontarget: 4000,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSection {
    pub seed: u64,
    pub train_fraction: f64,
    pub l2: f64,
    pub iters: usize,
    pub lr: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeOptions::default();
        Self {
            seed: 23,
            train_fraction: p.train_fraction,
            l2: p.l2,
            iters: p.iters,
            lr: p.lr,
        }
    }
}

impl ProbeSection {
    pub fn options(&self) -> ProbeOptions {
        ProbeOptions {
            train_fraction: self.train_fraction,
            l2: self.l2,
            iters: self.iters,
            lr: self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Config {
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub backend: BackendSection,
    pub trials: TrialSection,
    pub probe: ProbeSection,
    pub dcf: DcfParams,
    pub mi_bench: MiBenchConfig,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(p) = parts.next() {
            if parts.peek().is_none() {
                node.insert(p.to_string(), v.clone());
            } else {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("keys form a tree");
            }
        }
    }
    Value::Object(root)
}

fn toml_leaf(key: &str, v: &toml::Value) -> Result<Value> {
    Ok(match v {
        toml::Value::String(s) => Value::String(s.clone()),
        toml::Value::Integer(i) => Value::from(*i),
        toml::Value::Float(f) => serde_json::Number::from_f64(*f)
            .map(Value::Number)
            .ok_or_else(|| Error::Config(format!("`{key}`: {f} is not a finite number")))?,
        toml::Value::Boolean(b) => Value::Bool(*b),
        other => {
            return Err(Error::Config(format!(
                "`{key}`: expected a number or string, found {}",
                other.type_str()
            )))
        }
    })
}

fn flatten_toml(prefix: &str, t: &toml::Table, out: &mut Vec<(String, Value)>) -> Result<()> {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(inner) => flatten_toml(&key, inner, out)?,
            leaf => out.push((key.clone(), toml_leaf(&key, leaf)?)),
        }
    }
    Ok(())
}

/// Parses the value half of a `key=value` override. Bare words that are
/// not TOML literals are taken as strings, so `train.mode=deaan` works.
fn parse_override_value(key: &str, raw: &str) -> Result<Value> {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => toml_leaf(key, &t["v"]),
        Err(_) => Ok(Value::String(raw.to_string())),
    }
}

impl Config {
    fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Every valid dotted key.
    pub fn keys() -> Vec<String> {
        Config::default().flat().into_keys().collect()
    }

    fn with_values(&self, entries: &[(String, Value)]) -> Result<Self> {
        let mut flat = self.flat();
        for (key, v) in entries {
            let Some(old) = flat.get(key) else {
                return Err(Error::Config(format!(
                    "unknown config key `{key}`; valid keys: {}",
                    Config::keys().join(", ")
                )));
            };
            let compatible = matches!(
                (old, v),
                (Value::Number(_), Value::Number(_)) | (Value::String(_), Value::String(_)) | (Value::Bool(_), Value::Bool(_))
            );
            if !compatible {
                return Err(Error::Config(format!("`{key}`: expected a value like {old}, got {v}")));
            }
            flat.insert(key.clone(), v.clone());
        }
        let cfg: Config = serde_json::from_value(unflatten(&flat))
            .map_err(|e| Error::Config(format!("invalid config value: {e}")))?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config is not valid TOML: {e}")))?;
        let mut entries = Vec::new();
        flatten_toml("", &table, &mut entries)?;
        Config::default().with_values(&entries)
    }

    /// Applies `key=value` overrides (later ones win).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut entries = Vec::with_capacity(overrides.len());
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let k = k.trim().to_string();
            let v = parse_override_value(&k, v)?;
            entries.push((k, v));
        }
        self.with_values(&entries)
    }

    /// Reads `path` (if any), then applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Config::from_toml_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Config::default(),
        };
        base.with_overrides(overrides)
    }

    /// The config as a flat dotted-key document that [`from_toml_str`]
    /// reads back to the same value.
    ///
    /// [`from_toml_str`]: Config::from_toml_str
    pub fn to_flat_toml(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.flat() {
            let lit = match &v {
                Value::String(x) => toml::Value::String(x.clone()).to_string(),
                Value::Number(n) if n.is_f64() => {
                    let f = n.as_f64().unwrap();
                    let t = format!("{f:?}");
                    if t.contains(['.', 'e', 'E']) { t } else { format!("{t}.0") }
                }
                other => other.to_string(),
            };
            s.push_str(&format!("{k} = {lit}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Mode;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let cfg = Config::from_toml_str("# pinned\ntrain.lr = 2e-4\nsynth.seed = 3\ntrain.weights.lambda_mi = 0.1\n").unwrap();
        assert_eq!(cfg.train.lr, 2e-4);
        assert_eq!(cfg.synth.seed, 3);
        assert_eq!(cfg.train.weights.lambda_mi, 0.1);
        let cfg = cfg
            .with_overrides(&["train.mode=baseline".into(), "synth.seed = 9".into(), "train.lr=1".into()])
            .unwrap();
        assert_eq!(cfg.train.mode, Mode::Baseline);
        assert_eq!(cfg.synth.seed, 9);
        assert_eq!(cfg.train.lr, 1.0);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        match Config::default().with_overrides(&["train.lrr=1".into()]) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("train.lrr"));
                for k in ["train.lr", "synth.domain_shift", "backend.lda_dim", "probe.seed"] {
                    assert!(msg.contains(k), "{k} missing from {msg}");
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_and_variant_errors() {
        assert!(Config::default().with_overrides(&["train.lr=fast".into()]).is_err());
        assert!(Config::default().with_overrides(&["train.mode=sideways".into()]).is_err());
        assert!(Config::default().with_overrides(&["train.batch_size=2.5".into()]).is_err());
        assert!(Config::default().with_overrides(&["train.lr".into()]).is_err());
    }

    #[test]
    fn flat_document_round_trips() {
        let mut cfg = Config::default();
        cfg.train.lr = 3e-4;
        cfg.synth.domain_shift = 2.0;
        cfg.train.init_checkpoint = "runs/a b.ckpt".into();
        assert_eq!(Config::from_toml_str(&cfg.to_flat_toml()).unwrap(), cfg);
    }
}
