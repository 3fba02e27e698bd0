//! The decoder-only language model: text embedding, speech/text fusion,
//! masked next-token loss, LoRA injection and KV-cached inference.

mod model;
mod vocab;

pub use model::{
    fuse, FusedInput, KvCache, LanguageModel, LmConfig, LoraHandle, LoraSpec, SpeechEmbedding,
    TextEmbedding, LORA_TARGETS,
};
pub use vocab::{Vocabulary, BOS, EOS, PAD};
