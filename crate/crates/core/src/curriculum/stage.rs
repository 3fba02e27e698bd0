use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LoraSpec;
use crate::registry::Registry;
use crate::task::TaskKind;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainables {
    AdapterOnly,
    AdapterPlusLora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: TaskKind,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    /// Manifests concatenated into the stage's training pool.
    pub datasets: Vec<PathBuf>,
    pub trainables: Trainables,
    pub lora: Option<LoraSpec>,
    /// Registry name of the post-warmup schedule.
    pub schedule_tail: String,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl StageConfig {
    /// Full-scale settings: lr 1e-4 / 1e-4 / 1e-5, 1000 warmup steps, batch 16.
    pub fn full(stage: TaskKind) -> Self {
        let (lr_peak, max_steps) = match stage {
            TaskKind::Asr => (1e-4, 472_000),
            TaskKind::Smt => (1e-4, 44_000),
            TaskKind::Srt => (1e-5, 83_000),
        };
        let srt = stage == TaskKind::Srt;
        Self {
            stage,
            lr_peak,
            warmup_steps: 1000,
            max_steps,
            batch_size: 16,
            datasets: Vec::new(),
            trainables: if srt {
                Trainables::AdapterPlusLora
            } else {
                Trainables::AdapterOnly
            },
            lora: srt.then(LoraSpec::default),
            schedule_tail: "constant".into(),
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
        }
    }

    /// Settings that memorize the 64-utterance synthetic corpus.
    pub fn toy(stage: TaskKind) -> Self {
        let max_steps = match stage {
            TaskKind::Asr => 750,
            TaskKind::Smt => 300,
            TaskKind::Srt => 1000,
        };
        Self {
            lr_peak: 1e-3,
            warmup_steps: 20,
            max_steps,
            batch_size: 8,
            ..Self::full(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("{} stage: {m}", self.stage)));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if self.trainables == Trainables::AdapterPlusLora && self.lora.is_none() {
            return bad("AdapterPlusLora needs a lora spec");
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return bad("weight_decay must be ≥ 0 and clip_norm > 0");
        }
        if let Some(l) = &self.lora {
            l.validate()?;
        }
        schedule_tails().get(&self.schedule_tail)?;
        Ok(())
    }

    /// Learning rate at 1-based `step`.
    pub fn lr(&self, step: usize) -> Result<f64> {
        lr_schedule(step, self)
    }
}

/// Parameter names a stage updates: `adapter/*`, plus `llm_lora/*` when the
/// LM is unfrozen through LoRA.
pub fn trainable_parameters(cfg: &StageConfig, store: &ParamStore) -> BTreeSet<String> {
    store
        .iter()
        .map(|(_, n, _)| n)
        .filter(|n| is_trainable(cfg.trainables, n))
        .map(str::to_string)
        .collect()
}

pub(crate) fn is_trainable(t: Trainables, name: &str) -> bool {
    name.starts_with("adapter/") || (t == Trainables::AdapterPlusLora && name.starts_with("llm_lora/"))
}

/// Learning-rate multiplier after warmup, as a function of steps since
/// warmup ended and steps remaining.
pub trait ScheduleTail: Send + Sync {
    fn factor(&self, since_warmup: usize, total_after_warmup: usize) -> f64;
}

pub struct ConstantTail;

impl ScheduleTail for ConstantTail {
    fn factor(&self, _: usize, _: usize) -> f64 {
        1.0
    }
}

/// Linear decay to zero at `max_steps`.
pub struct LinearTail;

impl ScheduleTail for LinearTail {
    fn factor(&self, since: usize, total: usize) -> f64 {
        if total == 0 {
            1.0
        } else {
            (1.0 - since as f64 / total as f64).max(0.0)
        }
    }
}

/// Half-cosine decay to zero at `max_steps`.
pub struct CosineTail;

impl ScheduleTail for CosineTail {
    fn factor(&self, since: usize, total: usize) -> f64 {
        if total == 0 {
            1.0
        } else {
            let t = (since as f64 / total as f64).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

pub fn schedule_tails() -> Registry<dyn ScheduleTail> {
    let mut r: Registry<dyn ScheduleTail> = Registry::new("schedule tail");
    r.register("constant", Box::new(ConstantTail));
    r.register("linear", Box::new(LinearTail));
    r.register("cosine", Box::new(CosineTail));
    r
}

/// Linear warmup from 0 to `lr_peak` over `warmup_steps`, then the
/// configured tail.
pub fn lr_schedule(step: usize, cfg: &StageConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidInput("steps are 1-based".into()));
    }
    if step <= cfg.warmup_steps {
        return Ok(cfg.lr_peak * step as f64 / cfg.warmup_steps as f64);
    }
    let tails = schedule_tails();
    let tail = tails.get(&cfg.schedule_tail)?;
    let after = cfg.max_steps.saturating_sub(cfg.warmup_steps);
    Ok(cfg.lr_peak * tail.factor(step - cfg.warmup_steps, after))
}
