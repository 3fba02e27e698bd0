use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MelFeatures;
use crate::error::{Error, Result};
use crate::nn::{sinusoids, Attention, FeedForward, LayerNorm, Linear};
use crate::registry::Registry;
use crate::tensor::ops::Mask;
use crate::tensor::{Matrix, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Registry name of the backend (`toy`, `external`).
    pub backend: String,
    pub n_mels: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    /// Frames averaged into one output step.
    pub stride: usize,
    /// Seed of the fixed weights.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: "toy".into(),
            n_mels: 80,
            dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 128,
            stride: 2,
            seed: 0,
        }
    }
}

/// `H`: encoder states, one row per output step.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates(pub Matrix);

impl EncoderStates {
    pub fn steps(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }
}

/// A frozen speech encoder: `encode` is a pure function of features and
/// the weights fixed at construction.
pub trait SpeechEncoder: Send + Sync {
    fn config(&self) -> &EncoderConfig;

    fn output_len(&self, n_frames: usize) -> usize;

    fn encode(&self, features: &MelFeatures) -> Result<EncoderStates>;

    /// Weights, for checkpointing. There is no mutable counterpart.
    fn params(&self) -> &ParamStore;
}

/// Builds encoders of one kind; registered by name in [`encoder_backends`].
pub trait EncoderBackend: Send + Sync {
    /// `weights`, when given, replace the seeded initial weights by name.
    fn build(&self, cfg: &EncoderConfig, weights: Option<&ParamStore>) -> Result<Box<dyn SpeechEncoder>>;
}

pub fn encoder_backends() -> Registry<dyn EncoderBackend> {
    let mut r: Registry<dyn EncoderBackend> = Registry::new("encoder backend");
    r.register("toy", Box::new(ToyBackend));
    r.register("external", Box::new(ExternalBackend));
    r
}

pub fn build_encoder(cfg: &EncoderConfig, weights: Option<&ParamStore>) -> Result<Box<dyn SpeechEncoder>> {
    encoder_backends().get(&cfg.backend)?.build(cfg, weights)
}

struct ToyBackend;

impl EncoderBackend for ToyBackend {
    fn build(&self, cfg: &EncoderConfig, weights: Option<&ParamStore>) -> Result<Box<dyn SpeechEncoder>> {
        let mut enc = ToyEncoder::new(cfg)?;
        if let Some(w) = weights {
            if w.len() != enc.store.len() {
                return Err(Error::ConfigMismatch(format!(
                    "encoder expects {} tensors, checkpoint has {}",
                    enc.store.len(),
                    w.len()
                )));
            }
            for (_, name, value) in w.iter() {
                enc.store.assign(name, value.clone())?;
            }
        }
        Ok(Box::new(enc))
    }
}

/// Slot for a pretrained encoder loaded out of tree. Such a backend decides
/// its own padding convention (the toy encoder pads nothing).
struct ExternalBackend;

impl EncoderBackend for ExternalBackend {
    fn build(&self, _: &EncoderConfig, _: Option<&ParamStore>) -> Result<Box<dyn SpeechEncoder>> {
        Err(Error::Unsupported(
            "the `external` encoder backend has no implementation in this build; register one with `encoder_backends()`".into(),
        ))
    }
}

#[derive(Debug, Clone)]
struct EncBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

/// Small pre-LN transformer over strided log-mel frames with sinusoidal
/// positions. Weights come from a seeded initializer and never change.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    cfg: EncoderConfig,
    store: ParamStore,
    in_proj: Linear,
    blocks: Vec<EncBlock>,
    ln_f: LayerNorm,
}

impl ToyEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        if cfg.n_mels == 0 || cfg.dim == 0 || cfg.n_heads == 0 || cfg.stride == 0 {
            return Err(Error::InvalidConfig("encoder dimensions must be ≥ 1".into()));
        }
        if cfg.dim % cfg.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder dim {} not divisible by {} heads",
                cfg.dim, cfg.n_heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let in_proj = Linear::new(&mut store, "encoder/in_proj", cfg.n_mels, d, true, &mut rng);
        // fan-in scaled input projection
        let gain = 1.0 / (cfg.n_mels as f64).sqrt() / crate::nn::INIT_STD;
        store.get_mut(in_proj.w).mapv_inplace(|v| (v * gain) as f32 as f64);
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("encoder/layers.{i}");
                EncBlock {
                    ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d),
                    attn: Attention::new(&mut store, &format!("{p}.attn"), d, d, cfg.n_heads, &mut rng),
                    ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d),
                    ff: FeedForward::new(&mut store, &format!("{p}.ff"), d, cfg.ffn_hidden, &mut rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "encoder/ln_f", d);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            in_proj,
            blocks,
            ln_f,
        })
    }

    fn pool(&self, frames: &Matrix) -> Matrix {
        let s = self.cfg.stride;
        let t = frames.nrows().div_ceil(s);
        Matrix::from_shape_fn((t, frames.ncols()), |(i, j)| {
            let lo = i * s;
            let hi = (lo + s).min(frames.nrows());
            (lo..hi).map(|r| frames[[r, j]]).sum::<f64>() / (hi - lo) as f64
        })
    }
}

impl SpeechEncoder for ToyEncoder {
    fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn output_len(&self, n_frames: usize) -> usize {
        n_frames.div_ceil(self.cfg.stride)
    }

    fn encode(&self, features: &MelFeatures) -> Result<EncoderStates> {
        if features.n_mels() != self.cfg.n_mels {
            return Err(Error::ConfigMismatch(format!(
                "encoder expects {} mel bins, features have {}",
                self.cfg.n_mels,
                features.n_mels()
            )));
        }
        let x = self.pool(&features.frames);
        let mut h = self.in_proj.apply(&self.store, &x);
        h += &sinusoids(h.nrows(), self.cfg.dim);
        for b in &self.blocks {
            let a = b.ln1.apply(&self.store, &h);
            h += &b.attn.apply(&self.store, &a, &a, Mask::None);
            let f = b.ln2.apply(&self.store, &h);
            h += &b.ff.apply(&self.store, &f);
        }
        Ok(EncoderStates(self.ln_f.apply(&self.store, &h)))
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}
