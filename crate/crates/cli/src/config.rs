//! Flat `dotted.key=value` configuration over typed defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use srt_core::curriculum::{PretrainConfig, StageConfig};
use srt_core::datasets::{manifest_name, SyntheticSpec, LM_TEXT_FILE};
use srt_core::decoding::DecodeConfig;
use srt_core::model::ModelConfig;
use srt_core::task::TaskKind;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DataPaths {
    /// Corpus directory; supplies `<task>.jsonl` and `lm_text.jsonl` when
    /// the explicit lists are empty.
    pub dir: Option<PathBuf>,
    pub asr: Vec<PathBuf>,
    pub smt: Vec<PathBuf>,
    pub srt: Vec<PathBuf>,
    pub lm_text: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    pub ckpt: PathBuf,
    pub report: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub stage: BTreeMap<TaskKind, StageConfig>,
    pub decode: DecodeConfig,
    pub data: DataPaths,
    pub paths: Paths,
    pub synth: SyntheticSpec,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (model, stage): (ModelConfig, fn(TaskKind) -> StageConfig) = match name {
            "toy" => (ModelConfig::toy(), StageConfig::toy),
            "full" => (ModelConfig::default(), StageConfig::full),
            other => bail!("unknown preset `{other}` (available: toy, full)"),
        };
        Ok(Self {
            preset: name.into(),
            seed: 0,
            model,
            pretrain: PretrainConfig::default(),
            stage: TaskKind::ALL.into_iter().map(|k| (k, stage(k))).collect(),
            decode: DecodeConfig {
                max_new_tokens: 64,
                ..DecodeConfig::greedy()
            },
            data: DataPaths::default(),
            paths: Paths {
                ckpt: "checkpoints".into(),
                report: "reports".into(),
            },
            synth: SyntheticSpec::default(),
        })
    }

    /// Defaults, then `file`, then `overrides` (later wins). `preset` is
    /// applied before any other key.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            pairs.extend(parse_lines(&text).with_context(|| format!("in {}", path.display()))?);
        }
        for o in overrides {
            pairs.push(split_pair(o).with_context(|| format!("in --set {o}"))?);
        }
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map_or("toy", |(_, v)| v.as_str());
        let mut doc = serde_json::to_value(Self::preset(preset)?)?;
        let mut seed_set = false;
        for (key, raw) in &pairs {
            if key == "preset" {
                continue;
            }
            seed_set |= key == "seed";
            set_path(&mut doc, key, raw)?;
        }
        let mut cfg: Self = serde_json::from_value(doc).context("invalid configuration")?;
        if seed_set {
            cfg.apply_seed(cfg.seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// One seed for model init, pretraining, every stage and the corpus.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        for s in self.stage.values_mut() {
            s.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for s in self.stage.values() {
            s.validate()?;
        }
        self.decode.validate()?;
        Ok(())
    }

    pub fn stage(&self, kind: TaskKind) -> &StageConfig {
        &self.stage[&kind]
    }

    pub fn manifests(&self, kind: TaskKind) -> Vec<PathBuf> {
        let listed = match kind {
            TaskKind::Asr => &self.data.asr,
            TaskKind::Smt => &self.data.smt,
            TaskKind::Srt => &self.data.srt,
        };
        let listed = if listed.is_empty() {
            &self.stage(kind).datasets
        } else {
            listed
        };
        match (&self.data.dir, listed.is_empty()) {
            (Some(dir), true) => vec![dir.join(manifest_name(kind))],
            _ => listed.clone(),
        }
    }

    pub fn lm_text(&self) -> Option<PathBuf> {
        self.data
            .lm_text
            .clone()
            .or_else(|| self.data.dir.as_ref().map(|d| d.join(LM_TEXT_FILE)))
            .filter(|p| p.exists())
    }
}

fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').context("expected key=value")?;
    let k = k.trim();
    if k.is_empty() {
        bail!("empty key");
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// `#` starts a comment; blank lines are ignored.
fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter_map(|(i, l)| {
            let l = l.split_once('#').map_or(l, |(a, _)| a).trim();
            (!l.is_empty()).then(|| split_pair(l).with_context(|| format!("line {}", i + 1)))
        })
        .collect()
}

fn scalar(raw: &str, like: &Value) -> Value {
    match like {
        Value::String(_) => Value::String(raw.to_string()),
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}

fn set_path(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = &mut *doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("`{}` is not a section", parts[..i].join("."));
        };
        if !map.contains_key(*part) {
            let known: Vec<&str> = map.keys().map(String::as_str).collect();
            bail!("unknown config key `{key}` (expected one of: {})", known.join(", "));
        }
        node = map.get_mut(*part).expect("checked");
    }
    *node = match &*node {
        Value::Array(items) => {
            if raw.trim_start().starts_with('[') {
                serde_json::from_str(raw).with_context(|| format!("`{key}`: bad list"))?
            } else {
                let like = items.first().cloned().unwrap_or(Value::String(String::new()));
                Value::Array(
                    raw.split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| scalar(s, &like))
                        .collect(),
                )
            }
        }
        Value::Object(_) => serde_json::from_str(raw).with_context(|| format!("`{key}` expects a JSON object"))?,
        like => scalar(raw, like),
    };
    Ok(())
}
