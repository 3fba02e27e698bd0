//! Three-stage training (ASR, then SMT, then SRT), each stage resuming the
//! previous checkpoint.

mod ablate;
mod checkpoint;
mod eval;
mod optim;
mod stage;
mod train;

pub use ablate::{ablate, AblationReport, AblationRow, Pipeline};
pub use checkpoint::{Checkpoint, LossRecord, RngState, LOSS_LOG_FILE, MANIFEST_FILE};
pub use eval::{asr_exact_match, decode_task, srt_scores, SrtScores};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use stage::{
    lr_schedule, schedule_tails, trainable_parameters, ConstantTail, CosineTail, LinearTail, ScheduleTail,
    StageConfig, Trainables,
};
pub use train::{batch_loss, pretrain_base, run_stage, Example, PretrainConfig, StageData};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::task::TaskKind;

/// Stage settings and data for a whole curriculum.
#[derive(Debug, Clone)]
pub struct Curriculum {
    pub stages: BTreeMap<TaskKind, StageConfig>,
    pub data: BTreeMap<TaskKind, StageData>,
}

impl Curriculum {
    fn stage(&self, kind: TaskKind) -> Result<(&StageConfig, &StageData)> {
        let cfg = self
            .stages
            .get(&kind)
            .ok_or_else(|| Error::InvalidConfig(format!("no settings for the {kind} stage")))?;
        let data = self
            .data
            .get(&kind)
            .ok_or_else(|| Error::InvalidConfig(format!("no data for the {kind} stage")))?;
        Ok((cfg, data))
    }

    /// Runs `stages` in order from `init`, returning every stage's checkpoint.
    pub fn run(&self, init: &Checkpoint, stages: &[TaskKind]) -> Result<Vec<Checkpoint>> {
        let mut out: Vec<Checkpoint> = Vec::with_capacity(stages.len());
        for &kind in stages {
            let (cfg, data) = self.stage(kind)?;
            let next = run_stage(cfg, out.last().unwrap_or(init), data)?;
            out.push(next);
        }
        Ok(out)
    }
}
