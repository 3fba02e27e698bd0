//! WER with text normalization, corpus BLEU with `13a`/`char` tokenization,
//! and direction-matrix aggregation.

mod bleu;
mod normalize;
mod report;
mod wer;

pub use bleu::{
    bleu, bleu_stats, bleu_tokenizers, BleuSignature, BleuStats, BleuTokenizer, Tokenizer13a, TokenizerChar,
    CHAR_LANGUAGES, MAX_ORDER,
};
pub use normalize::normalize;
pub use report::{aggregate, DirectionScore, EvalReport};
pub use wer::{edit_distance, wer};
