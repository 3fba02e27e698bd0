//! Autoregressive generation over fused prefixes.

mod stepper;
mod strategy;
mod synthetic;

use std::time::Instant;

use serde::Serialize;

pub use stepper::LmStepper;
pub use strategy::{decode_strategies, Beam, DecodeConfig, DecodeStrategy, Generation, Greedy, StepModel};
pub use synthetic::SyntheticScorer;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Decodes one prefix.
pub fn generate(model: &mut dyn StepModel, prefix: &Matrix, cfg: &DecodeConfig) -> Result<Generation> {
    let strategies = decode_strategies();
    let s = strategies.get(&cfg.strategy)?;
    Ok(s.decode(model, std::slice::from_ref(prefix), cfg)?.remove(0))
}

/// Bytes of decoder state one batch of `batch` prefixes, the longest
/// `max_prefix` rows, needs at peak.
pub fn batch_bytes(model: &dyn StepModel, batch: usize, max_prefix: usize, cfg: &DecodeConfig) -> usize {
    batch * cfg.width() * model.state_bytes(max_prefix + cfg.max_new_tokens)
}

/// Decodes `prefixes` in groups of `batch_size`. A group whose peak state
/// would exceed `memory_budget` bytes fails with `BatchTooLarge` before any
/// work is done.
pub fn generate_batch(
    model: &mut dyn StepModel,
    prefixes: &[Matrix],
    cfg: &DecodeConfig,
    batch_size: usize,
    memory_budget: Option<usize>,
) -> Result<Vec<Generation>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be ≥ 1".into()));
    }
    if let Some(w) = prefixes.first().map(Matrix::ncols) {
        if prefixes.iter().any(|p| p.ncols() != w) {
            return Err(Error::ConfigMismatch("prefixes differ in width".into()));
        }
    }
    let strategies = decode_strategies();
    let strategy = strategies.get(&cfg.strategy)?;
    if let Some(budget) = memory_budget {
        for group in prefixes.chunks(batch_size) {
            let longest = group.iter().map(Matrix::nrows).max().unwrap_or(0);
            let required = batch_bytes(model, group.len(), longest, cfg);
            if required > budget {
                return Err(Error::BatchTooLarge { required, budget });
            }
        }
    }
    let mut out = Vec::with_capacity(prefixes.len());
    for group in prefixes.chunks(batch_size) {
        out.extend(strategy.decode(model, group, cfg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub strategy: String,
    pub batch: usize,
    /// `None` when the batch did not fit the memory budget.
    pub wall_seconds: Option<f64>,
    pub items: usize,
}

/// Times `generate_batch` for every strategy and batch size.
pub fn bench(
    model: &mut dyn StepModel,
    prefixes: &[Matrix],
    configs: &[DecodeConfig],
    batch_sizes: &[usize],
    memory_budget: Option<usize>,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for cfg in configs {
        for &batch in batch_sizes {
            let start = Instant::now();
            let wall_seconds = match generate_batch(model, prefixes, cfg, batch, memory_budget) {
                Ok(_) => Some(start.elapsed().as_secs_f64()),
                Err(Error::BatchTooLarge { .. }) => None,
                Err(e) => return Err(e),
            };
            rows.push(BenchRow {
                strategy: strategy_label(cfg),
                batch,
                wall_seconds,
                items: prefixes.len(),
            });
        }
    }
    Ok(rows)
}

fn strategy_label(cfg: &DecodeConfig) -> String {
    if cfg.strategy == "beam" {
        format!("beam{}", cfg.beam_size)
    } else {
        cfg.strategy.clone()
    }
}

/// `strategy,batch,wall_seconds,items`, with `/` for batches over budget.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("strategy,batch,wall_seconds,items\n");
    for r in rows {
        let t = r.wall_seconds.map_or_else(|| "/".to_string(), |t| format!("{t:.3}"));
        s.push_str(&format!("{},{},{},{}\n", r.strategy, r.batch, t, r.items));
    }
    s
}

#[cfg(test)]
mod tests;
