use serde::{Deserialize, Serialize};

use crate::decoding::{generate_batch, DecodeConfig, LmStepper};
use crate::error::Result;
use crate::metrics::{bleu, BleuSignature};
use crate::model::SrtModel;
use crate::task::{build_instruction, split_srt_output, SrtSample, TaskKind};
use crate::tensor::Matrix;

use super::train::StageData;

/// Decodes every example under `kind`'s instruction and returns the text.
/// `Srt` here means the instruction `<|src|><|tgt|>`, which also serves as
/// instruction-only speech translation prompting.
pub fn decode_task(model: &SrtModel, kind: TaskKind, data: &StageData, cfg: &DecodeConfig) -> Result<Vec<String>> {
    let prefixes = data
        .examples
        .iter()
        .map(|ex| {
            let states = model.encode(&ex.features)?;
            Ok(model.prefix(&states, &build_instruction(kind, &ex.sample)?)?.rows)
        })
        .collect::<Result<Vec<Matrix>>>()?;
    let cfg = DecodeConfig {
        eos_id: model.vocab().eos(),
        ..cfg.clone()
    };
    let mut stepper = LmStepper::new(model.lm(), model.store());
    let out = generate_batch(&mut stepper, &prefixes, &cfg, 16, None)?;
    Ok(out.iter().map(|g| model.vocab().decode(&g.tokens)).collect())
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Share of ASR outputs equal to the reference transcription.
pub fn asr_exact_match(model: &SrtModel, data: &StageData, cfg: &DecodeConfig) -> Result<f64> {
    let out = decode_task(model, TaskKind::Asr, data, cfg)?;
    let hits = out
        .iter()
        .zip(&data.examples)
        .filter(|(o, ex)| **o == ex.sample.transcription)
        .count();
    Ok(fraction(hits, out.len()))
}

/// Scores of SRT-instruction outputs on samples with a translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrtScores {
    /// Transcription and translation both exact after parsing.
    pub joint_exact: f64,
    pub translation_exact: f64,
    pub transcription_exact: f64,
    /// Corpus BLEU of the translations.
    pub bleu: f64,
    /// Outputs without the tag-pair delimiter.
    pub parse_misses: usize,
}

fn reference(s: &SrtSample) -> &str {
    s.translation.as_deref().unwrap_or_default()
}

/// Evaluates the `<|src|><|tgt|>` instruction. With `joint`, outputs are
/// parsed into transcription and translation; otherwise the whole output is
/// taken as the translation.
pub fn srt_scores(model: &SrtModel, data: &StageData, cfg: &DecodeConfig, joint: bool) -> Result<SrtScores> {
    let out = decode_task(model, TaskKind::Srt, data, cfg)?;
    let (mut both, mut trans, mut transc, mut misses) = (0, 0, 0, 0);
    let mut hyps = Vec::with_capacity(out.len());
    for (o, ex) in out.iter().zip(&data.examples) {
        let s = &ex.sample;
        let tgt = s.tgt.as_ref().expect("SRT data carries targets");
        let (y, z) = if joint {
            let (y, z, missed) = split_srt_output(o, &s.src, tgt);
            misses += usize::from(missed);
            (y, z)
        } else {
            (String::new(), o.clone())
        };
        let y_ok = y == s.transcription;
        let z_ok = z == reference(s);
        transc += usize::from(y_ok);
        trans += usize::from(z_ok);
        both += usize::from(y_ok && z_ok);
        hyps.push(z);
    }
    let refs: Vec<&str> = data.examples.iter().map(|e| reference(&e.sample)).collect();
    let sig = data
        .examples
        .first()
        .and_then(|e| e.sample.tgt.as_ref())
        .map_or_else(|| BleuSignature::new("13a"), BleuSignature::for_language);
    let n = out.len();
    Ok(SrtScores {
        joint_exact: fraction(both, n),
        translation_exact: fraction(trans, n),
        transcription_exact: fraction(transc, n),
        bleu: if n == 0 { 0.0 } else { bleu(&refs, &hyps, &sig)? },
        parse_misses: misses,
    })
}
