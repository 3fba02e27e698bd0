use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{EncoderStates, MelConfig, MelFeatures};
use crate::datasets::{load_task_manifest, FeatureSource, ManifestRow, TextPair};
use crate::error::{Error, Result};
use crate::model::SrtModel;
use crate::task::{build_instruction, build_target, SrtSample, TaskKind};
use crate::tensor::{Graph, ParamMask, Var};

use super::checkpoint::{Checkpoint, LossRecord};
use super::optim::{clip_grad_norm, AdamW, AdamWConfig};
use super::stage::{is_trainable, StageConfig, Trainables};

/// An utterance with its features.
#[derive(Debug, Clone)]
pub struct Example {
    pub sample: SrtSample,
    pub features: MelFeatures,
}

/// The training pool of one stage.
#[derive(Debug, Clone, Default)]
pub struct StageData {
    pub examples: Vec<Example>,
}

impl StageData {
    /// Concatenates manifests in order; audio paths resolve against each
    /// manifest's directory.
    pub fn load(paths: &[PathBuf], kind: TaskKind, mel: &MelConfig) -> Result<Self> {
        let mut examples = Vec::new();
        for path in paths {
            let rows = load_task_manifest(path, kind)?;
            let base = path.parent().unwrap_or(Path::new("."));
            examples.extend(Self::from_rows(&rows, base, mel)?.examples);
        }
        Ok(Self { examples })
    }

    pub fn from_rows(rows: &[ManifestRow], base: &Path, mel: &MelConfig) -> Result<Self> {
        let mut source = FeatureSource::with_config(base, mel.clone());
        let examples = rows
            .iter()
            .map(|r| {
                Ok(Example {
                    sample: r.to_sample()?,
                    features: source.load(&r.audio_ref())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Encoder states plus instruction and target ids for one task.
pub(crate) struct Prepared {
    pub states: EncoderStates,
    pub instruction: Vec<usize>,
    pub target: Vec<usize>,
}

pub(crate) fn prepare(model: &SrtModel, kind: TaskKind, data: &StageData) -> Result<Vec<Prepared>> {
    data.examples
        .iter()
        .map(|ex| {
            Ok(Prepared {
                states: model.encode(&ex.features)?,
                instruction: model.vocab().encode(&build_instruction(kind, &ex.sample)?)?,
                target: model.target_ids(&build_target(kind, &ex.sample)?)?,
            })
        })
        .collect()
}

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn stream_of(kind: TaskKind) -> u64 {
    match kind {
        TaskKind::Asr => 1,
        TaskKind::Smt => 2,
        TaskKind::Srt => 3,
    }
}

/// Mean teacher-forced loss of `kind` over `indices`, without updating.
pub fn batch_loss(model: &SrtModel, kind: TaskKind, data: &StageData, indices: &[usize]) -> Result<f64> {
    let prepared = prepare(model, kind, data)?;
    let mut g = Graph::new(model.store());
    let losses = indices
        .iter()
        .map(|&i| {
            let p = prepared
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("example {i} out of range")))?;
            model.loss(&mut g, &p.states, &p.instruction, &p.target)
        })
        .collect::<Result<Vec<Var>>>()?;
    let loss = g.mean(&losses);
    Ok(g.scalar(loss))
}

struct Loop<'a> {
    label: String,
    lr: &'a dyn Fn(usize) -> Result<f64>,
    steps: usize,
    clip_norm: Option<f64>,
    weight_decay: f64,
}

/// Runs `steps` AdamW updates over the parameters selected by `mask`;
/// `batch_loss` builds the per-step loss on a fresh tape.
fn optimize(
    model: &mut SrtModel,
    mask: &ParamMask,
    spec: Loop<'_>,
    rng: &mut ChaCha8Rng,
    log: &mut Vec<LossRecord>,
    mut build: impl FnMut(&SrtModel, &mut Graph, &mut ChaCha8Rng) -> Result<Var>,
) -> Result<()> {
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: spec.weight_decay,
            ..AdamWConfig::default()
        },
        model.store(),
        mask,
    );
    let mut dropout_rng = Some(ChaCha8Rng::seed_from_u64(rng.random()));
    for step in 1..=spec.steps {
        let lr = (spec.lr)(step)?;
        let (loss, mut grads) = {
            let mut g = Graph::with_trainable(model.store(), mask)
                .with_dropout_rng(dropout_rng.take().expect("returned each step"));
            let loss = build(model, &mut g, rng)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence { step });
            }
            let grads = g.backward(loss).into_params();
            dropout_rng = g.take_rng();
            (value, grads)
        };
        if let Some(c) = spec.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        opt.step(model.store_mut(), &grads, lr);
        log.push(LossRecord {
            stage: spec.label.clone(),
            step,
            lr,
            loss,
        });
        if step % 250 == 0 {
            log::debug!("{} step {step}: loss {loss:.4}", spec.label);
        }
    }
    Ok(())
}

/// Trains one curriculum stage from `init` and returns the resulting
/// checkpoint. Only `adapter/*` (and `llm_lora/*` when LoRA is enabled)
/// change; encoder and base LM weights are carried over untouched.
pub fn run_stage(cfg: &StageConfig, init: &Checkpoint, data: &StageData) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput(format!("{} stage has no training data", cfg.stage)));
    }
    let mut model = init.restore()?;
    let mut rng = stage_rng(cfg.seed, stream_of(cfg.stage));
    if cfg.trainables == Trainables::AdapterPlusLora && model.lm().lora().is_none() {
        let spec = cfg.lora.as_ref().expect("validated");
        model.apply_lora(spec, &mut rng)?;
    }
    let prepared = prepare(&model, cfg.stage, data)?;
    let mask = model.store().mask(|n| is_trainable(cfg.trainables, n));
    let mut log = init.loss_log.clone();
    let n = prepared.len();
    let batch = cfg.batch_size;
    optimize(
        &mut model,
        &mask,
        Loop {
            label: cfg.stage.to_string(),
            lr: &|s| cfg.lr(s),
            steps: cfg.max_steps,
            clip_norm: Some(cfg.clip_norm),
            weight_decay: cfg.weight_decay,
        },
        &mut rng,
        &mut log,
        |model, g, rng| {
            let losses = (0..batch)
                .map(|_| {
                    let p = &prepared[rng.random_range(0..n)];
                    model.loss(g, &p.states, &p.instruction, &p.target)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(g.mean(&losses))
        },
    )?;
    let mut provenance = init.provenance.clone();
    provenance.push(cfg.stage.to_string());
    Ok(Checkpoint::capture(
        &model,
        provenance,
        init.step + cfg.max_steps as u64,
        &rng,
        log,
    ))
}

/// Text-only training of the base LM, standing in for a pretrained
/// backbone. Half the examples copy the source sentence, half translate it;
/// the speech slots hold the source's own token embeddings, padded to the
/// query count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub copy_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            copy_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Trains every `llm/*` weight on `pairs`; the result is tagged `base`.
pub fn pretrain_base(cfg: &PretrainConfig, init: &Checkpoint, pairs: &[TextPair]) -> Result<Checkpoint> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no text pairs for LM pretraining".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..=1.0).contains(&cfg.copy_fraction) {
        return Err(Error::InvalidConfig("pretrain: batch ≥ 1, lr > 0, copy fraction in [0, 1]".into()));
    }
    let mut model = init.restore()?;
    let vocab = model.vocab().clone();
    let n_q = model.n_queries();
    let mut prepared = Vec::with_capacity(pairs.len());
    for p in pairs {
        let s = SrtSample::new("", p.src.clone(), Some(p.tgt.clone()), p.source.clone(), Some(p.target.clone()))?;
        let mut slots = vocab.encode(&p.source)?;
        if slots.len() < n_q {
            slots.resize(n_q, vocab.pad());
        }
        let task = |kind| -> Result<(Vec<usize>, Vec<usize>)> {
            let mut target = vocab.encode(&build_target(kind, &s)?)?;
            target.push(vocab.eos());
            Ok((vocab.encode(&build_instruction(kind, &s)?)?, target))
        };
        prepared.push((slots, task(TaskKind::Asr)?, task(TaskKind::Smt)?));
    }
    let mask = model.store().mask(|n| n.starts_with("llm/"));
    let mut rng = stage_rng(cfg.seed, 0);
    let mut log = init.loss_log.clone();
    optimize(
        &mut model,
        &mask,
        Loop {
            label: "base".into(),
            lr: &|_| Ok(cfg.lr),
            steps: cfg.steps,
            clip_norm: None,
            weight_decay: cfg.weight_decay,
        },
        &mut rng,
        &mut log,
        |model, g, rng| {
            let lm = model.lm();
            let losses = (0..cfg.batch_size)
                .map(|_| {
                    let (slots, copy, mt) = &prepared[rng.random_range(0..prepared.len())];
                    let (instr, target) = if rng.random::<f64>() < cfg.copy_fraction { copy } else { mt };
                    let speech = lm.token_rows(g, slots);
                    let text = lm.embed_text(g, instr)?;
                    let prefix = g.concat_rows(&[speech, text]);
                    lm.forward_loss(g, prefix, target)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(g.mean(&losses))
        },
    )?;
    let mut provenance = init.provenance.clone();
    provenance.push("base".into());
    Ok(Checkpoint::capture(
        &model,
        provenance,
        init.step + cfg.steps as u64,
        &rng,
        log,
    ))
}
