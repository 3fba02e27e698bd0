use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Tensors};
use crate::error::{Error, Result};
use crate::lm::{LoraSpec, Vocabulary};
use crate::model::{ModelConfig, SrtModel};
use crate::tensor::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream, enough to continue it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    provenance: Vec<String>,
    stage: Option<String>,
    step: u64,
    config_hash: String,
    rng: RngState,
    model: ModelConfig,
    vocab: Vec<String>,
    lora: Option<LoraSpec>,
    namespaces: Vec<String>,
}

/// A trained model at a stage boundary: weights by namespace plus the
/// bookkeeping needed to continue the curriculum.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Stages applied so far, oldest first (`base`, `asr`, `smt`, `srt`).
    pub provenance: Vec<String>,
    /// Optimizer steps taken across all stages.
    pub step: u64,
    pub config_hash: String,
    pub rng: RngState,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub lora: Option<LoraSpec>,
    pub blobs: BTreeMap<String, Tensors>,
    pub loss_log: Vec<LossRecord>,
}

fn namespace(name: &str) -> &str {
    name.split_once('/').map_or(name, |(ns, _)| ns)
}

fn split_store(store: &ParamStore, out: &mut BTreeMap<String, Tensors>) {
    for (_, name, value) in store.iter() {
        out.entry(namespace(name).to_string())
            .or_default()
            .insert(name.to_string(), value.clone());
    }
}

impl Checkpoint {
    pub fn capture(
        model: &SrtModel,
        provenance: Vec<String>,
        step: u64,
        rng: &ChaCha8Rng,
        loss_log: Vec<LossRecord>,
    ) -> Self {
        let mut blobs = BTreeMap::new();
        split_store(model.encoder().params(), &mut blobs);
        split_store(model.store(), &mut blobs);
        Self {
            provenance,
            step,
            config_hash: model.config_hash(),
            rng: RngState::capture(rng),
            model: model.config().clone(),
            vocab: model.vocab().tokens().to_vec(),
            lora: model.lm().lora().cloned(),
            blobs,
            loss_log,
        }
    }

    /// Untrained model, the starting point of a curriculum.
    pub fn fresh(cfg: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let model = SrtModel::new(cfg, vocab, seed)?;
        Ok(Self::capture(&model, Vec::new(), 0, &ChaCha8Rng::seed_from_u64(seed), Vec::new()))
    }

    pub fn last_stage(&self) -> Option<&str> {
        self.provenance.last().map(String::as_str)
    }

    /// Fails with `ConfigMismatch` unless this checkpoint was produced under
    /// `cfg` (and its own vocabulary).
    pub fn ensure_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let vocab = Vocabulary::from_tokens(self.vocab.clone())?;
        let want = cfg.hash(&vocab);
        if want != self.config_hash {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config hash {} does not match the requested model ({want})",
                self.config_hash
            )));
        }
        Ok(())
    }

    /// Rebuilds the model with every stored weight.
    pub fn restore(&self) -> Result<SrtModel> {
        let vocab = Vocabulary::from_tokens(self.vocab.clone())?;
        if self.model.hash(&vocab) != self.config_hash {
            return Err(Error::ConfigMismatch("stored config hash does not match stored config".into()));
        }
        let mut model = SrtModel::new(&self.model, vocab, 0)?;
        if let Some(spec) = &self.lora {
            model.apply_lora(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        }
        let mut encoder = ParamStore::new();
        if let Some(t) = self.blobs.get("encoder") {
            for (name, value) in t {
                encoder.add(name.clone(), value.clone());
            }
        }
        model.load_encoder(&encoder)?;

        let mut seen = 0;
        for (ns, tensors) in &self.blobs {
            if ns == "encoder" {
                continue;
            }
            for (name, value) in tensors {
                model.store_mut().assign(name, value.clone())?;
                seen += 1;
            }
        }
        if seen != model.store().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} of {} model tensors",
                model.store().len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: FORMAT_VERSION,
            provenance: self.provenance.clone(),
            stage: self.provenance.last().cloned(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            rng: self.rng.clone(),
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            lora: self.lora.clone(),
            namespaces: self.blobs.keys().cloned().collect(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        for (ns, tensors) in &self.blobs {
            container::write(&dir.join(format!("{ns}.bin")), tensors)?;
        }
        let mut log = fs::File::create(dir.join(LOSS_LOG_FILE))?;
        for r in &self.loss_log {
            serde_json::to_writer(&mut log, r)?;
            log.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", m.format)));
        }
        let mut blobs = BTreeMap::new();
        for ns in &m.namespaces {
            let tensors = container::read(&dir.join(format!("{ns}.bin")))?;
            if let Some(bad) = tensors.keys().find(|k| namespace(k) != ns) {
                return Err(Error::Checkpoint(format!("{bad} stored in namespace {ns}")));
            }
            blobs.insert(ns.clone(), tensors);
        }
        let log_path = dir.join(LOSS_LOG_FILE);
        let loss_log = if log_path.exists() {
            fs::read_to_string(&log_path)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<_, _>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            provenance: m.provenance,
            step: m.step,
            config_hash: m.config_hash,
            rng: m.rng,
            model: m.model,
            vocab: m.vocab,
            lora: m.lora,
            blobs,
            loss_log,
        })
    }
}
