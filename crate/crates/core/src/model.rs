//! The assembled system: frozen encoder, adapter and language model sharing
//! one vocabulary.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{Adapter, AdapterConfig};
use crate::audio::{build_encoder, EncoderConfig, EncoderStates, MelFeatures, SpeechEncoder};
use crate::error::{Error, Result};
use crate::lm::{fuse, FusedInput, LanguageModel, LmConfig, LoraHandle, LoraSpec, SpeechEmbedding, Vocabulary};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub lm: LmConfig,
}

impl Default for ModelConfig {
    /// Full-size adapter (80 queries of width 768) over the toy encoder and LM.
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            lm: LmConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale dimensions used for the synthetic curriculum.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                n_mels: 16,
                dim: 32,
                n_heads: 4,
                ffn_hidden: 128,
                ..EncoderConfig::default()
            },
            adapter: AdapterConfig {
                n_queries: 16,
                query_dim: 32,
                n_layers: 2,
                n_heads: 4,
                ffn_hidden: 128,
                mlp_hidden: 128,
                d_llm: 64,
                encoder_dim: 32,
            },
            lm: LmConfig {
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                ffn_hidden: 256,
                max_positions: 128,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        self.lm.validate()?;
        if self.adapter.encoder_dim != self.encoder.dim {
            return Err(Error::ConfigMismatch(format!(
                "adapter.encoder_dim {} != encoder.dim {}",
                self.adapter.encoder_dim, self.encoder.dim
            )));
        }
        if self.adapter.d_llm != self.lm.d_model {
            return Err(Error::ConfigMismatch(format!(
                "adapter.d_llm {} != lm.d_model {}",
                self.adapter.d_llm, self.lm.d_model
            )));
        }
        Ok(())
    }

    /// SHA-256 over the dimensions and the vocabulary; two checkpoints with
    /// equal hashes have interchangeable parameter shapes.
    pub fn hash(&self, vocab: &Vocabulary) -> String {
        let doc = serde_json::json!({ "model": self, "vocab": vocab.tokens() });
        let digest = Sha256::digest(doc.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub struct SrtModel {
    cfg: ModelConfig,
    vocab: Vocabulary,
    encoder: Box<dyn SpeechEncoder>,
    store: ParamStore,
    adapter: Adapter,
    lm: LanguageModel,
}

impl std::fmt::Debug for SrtModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SrtModel")
            .field("cfg", &self.cfg)
            .field("vocab", &self.vocab.len())
            .field("params", &self.store.len())
            .finish()
    }
}

impl SrtModel {
    /// Fresh model; adapter and LM weights are drawn from `seed`, the encoder
    /// from its own configured seed.
    pub fn new(cfg: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = build_encoder(&cfg.encoder, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let adapter = Adapter::new(&mut store, &cfg.adapter, &mut rng)?;
        let lm = LanguageModel::new(&mut store, &cfg.lm, vocab.len(), &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            encoder,
            store,
            adapter,
            lm,
        })
    }

    /// Replaces the encoder with one built from checkpointed weights.
    pub fn load_encoder(&mut self, weights: &ParamStore) -> Result<()> {
        self.encoder = build_encoder(&self.cfg.encoder, Some(weights))?;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> String {
        self.cfg.hash(&self.vocab)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn encoder(&self) -> &dyn SpeechEncoder {
        self.encoder.as_ref()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn lm(&self) -> &LanguageModel {
        &self.lm
    }

    pub fn n_queries(&self) -> usize {
        self.cfg.adapter.n_queries
    }

    pub fn apply_lora(&mut self, spec: &LoraSpec, rng: &mut impl Rng) -> Result<LoraHandle> {
        self.lm.apply_lora(&mut self.store, spec, rng)
    }

    pub fn encode(&self, features: &MelFeatures) -> Result<EncoderStates> {
        self.encoder.encode(features)
    }

    pub fn speech_embedding(&self, states: &EncoderStates) -> Result<SpeechEmbedding> {
        self.adapter.adapt_eval(&self.store, states)
    }

    /// `E^Z` for an utterance and an instruction string.
    pub fn prefix(&self, states: &EncoderStates, instruction: &str) -> Result<FusedInput> {
        let ex = self.speech_embedding(states)?;
        let ids = self.vocab.encode(instruction)?;
        let et = self.lm.embed_text_eval(&self.store, &ids)?;
        fuse(&ex, &et)
    }

    /// Target text as ids with `</s>` appended.
    pub fn target_ids(&self, target: &str) -> Result<Vec<usize>> {
        let mut ids = self.vocab.encode(target)?;
        ids.push(self.vocab.eos());
        Ok(ids)
    }

    /// Taped `E^Z` for precomputed encoder states and instruction ids.
    pub fn prefix_var(&self, g: &mut Graph, states: &EncoderStates, instruction: &[usize]) -> Result<Var> {
        let h = g.constant(states.0.clone());
        let ex = self.adapter.adapt(g, h)?;
        let et = self.lm.embed_text(g, instruction)?;
        Ok(g.concat_rows(&[ex, et]))
    }

    /// Teacher-forced loss of one example.
    pub fn loss(&self, g: &mut Graph, states: &EncoderStates, instruction: &[usize], target: &[usize]) -> Result<Var> {
        let prefix = self.prefix_var(g, states, instruction)?;
        self.lm.forward_loss(g, prefix, target)
    }
}
