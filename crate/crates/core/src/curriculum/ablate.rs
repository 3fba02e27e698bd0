use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::task::TaskKind;

use super::checkpoint::Checkpoint;
use super::eval::{srt_scores, SrtScores};
use super::{run_stage, Curriculum};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pipeline {
    pub name: String,
    pub stages: Vec<TaskKind>,
}

impl Pipeline {
    pub fn new(name: impl Into<String>, stages: Vec<TaskKind>) -> Result<Self> {
        let p = Self {
            name: name.into(),
            stages,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn full() -> Self {
        Self {
            name: "full".into(),
            stages: TaskKind::ALL.to_vec(),
        }
    }

    /// The full pipeline and each single-stage removal.
    pub fn leave_one_out() -> Vec<Self> {
        let mut out = vec![Self::full()];
        for skip in TaskKind::ALL {
            out.push(Self {
                name: format!("w/o {}", skip.as_str().to_uppercase()),
                stages: TaskKind::ALL.into_iter().filter(|&k| k != skip).collect(),
            });
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig(format!("pipeline `{}` has no stages", self.name)));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "pipeline `{}` must list stages once each in ASR, SMT, SRT order",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub pipeline: Pipeline,
    /// Pipelines without the SRT stage are prompted with the SRT instruction
    /// and their whole output scored as the translation.
    pub joint_parse: bool,
    pub scores: SrtScores,
    pub delta_translation_exact: f64,
    pub delta_bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub reference: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.pipeline.name == name)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "pipeline", "joint", "trans", "Δtrans", "BLEU", "ΔBLEU"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:>8.3} {:>8.3} {:>+8.3} {:>8.1} {:>+8.1}\n",
                r.pipeline.name,
                r.scores.joint_exact,
                r.scores.translation_exact,
                r.delta_translation_exact,
                r.scores.bleu,
                r.delta_bleu
            ));
        }
        s
    }
}

/// Trains each pipeline from `base` and scores it on the SRT data. Shared
/// stage prefixes are trained once. Deltas are relative to the full
/// pipeline if present, else the first one.
pub fn ablate(
    curriculum: &Curriculum,
    base: &Checkpoint,
    pipelines: &[Pipeline],
    decode: &DecodeConfig,
) -> Result<AblationReport> {
    if pipelines.is_empty() {
        return Err(Error::InvalidConfig("no pipelines to ablate".into()));
    }
    for p in pipelines {
        p.validate()?;
    }
    let eval_data = curriculum
        .data
        .get(&TaskKind::Srt)
        .ok_or_else(|| Error::InvalidConfig("ablation needs SRT data for evaluation".into()))?;

    let mut memo: HashMap<Vec<TaskKind>, Checkpoint> = HashMap::new();
    let mut rows = Vec::with_capacity(pipelines.len());
    for p in pipelines {
        for n in 1..=p.stages.len() {
            let key = p.stages[..n].to_vec();
            if memo.contains_key(&key) {
                continue;
            }
            let prev = if n == 1 { base } else { &memo[&p.stages[..n - 1]] };
            let kind = p.stages[n - 1];
            let cfg = curriculum
                .stages
                .get(&kind)
                .ok_or_else(|| Error::InvalidConfig(format!("no settings for the {kind} stage")))?;
            let data = curriculum
                .data
                .get(&kind)
                .ok_or_else(|| Error::InvalidConfig(format!("no data for the {kind} stage")))?;
            let ckpt = run_stage(cfg, prev, data)?;
            memo.insert(key, ckpt);
        }
        let model = memo[&p.stages].restore()?;
        let joint = p.stages.contains(&TaskKind::Srt);
        rows.push(AblationRow {
            pipeline: p.clone(),
            joint_parse: joint,
            scores: srt_scores(&model, eval_data, decode, joint)?,
            delta_translation_exact: 0.0,
            delta_bleu: 0.0,
        });
    }
    let ref_idx = rows
        .iter()
        .position(|r| r.pipeline.stages == TaskKind::ALL)
        .unwrap_or(0);
    let (ref_t, ref_b) = (rows[ref_idx].scores.translation_exact, rows[ref_idx].scores.bleu);
    for r in &mut rows {
        r.delta_translation_exact = r.scores.translation_exact - ref_t;
        r.delta_bleu = r.scores.bleu - ref_b;
    }
    Ok(AblationReport {
        reference: rows[ref_idx].pipeline.name.clone(),
        rows,
    })
}
