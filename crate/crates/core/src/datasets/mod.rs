//! JSON-lines manifest ingestion and the seeded synthetic corpus.

mod manifest;
mod synth;

pub use manifest::{
    load_manifest, load_task_manifest, unresolved, write_manifest, AudioRef, FeatureSource, ManifestRow,
};
pub use synth::{
    load_lm_text, manifest_name, synth_corpus, AudioMode, Lexicon, SyntheticCorpus, SyntheticSpec, TextPair,
    FEATURES_FILE, LEXICON_FILE, LM_TEXT_FILE,
};
