use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, ManifestRow};
use crate::audio::{write_wav, Waveform};
use crate::container::{self, Tensors};
use crate::error::{Error, Result};
use crate::task::{LanguageTag, TaskKind};
use crate::tensor::Matrix;

pub const FEATURES_FILE: &str = "features.bin";
pub const LEXICON_FILE: &str = "lexicon.json";
const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";
const SAMPLE_RATE: u32 = 16_000;
/// Samples per rendered character in synth-wav mode (4 frames at 10 ms).
const CHAR_SAMPLES: usize = 640;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AudioMode {
    /// Feature matrices written straight to a blob.
    #[serde(rename = "synth-mel")]
    SynthMel,
    /// Sine chirps written as WAV files, one tone per character.
    #[serde(rename = "synth-wav")]
    SynthWav,
}

impl std::str::FromStr for AudioMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth-mel" => Ok(AudioMode::SynthMel),
            "synth-wav" => Ok(AudioMode::SynthWav),
            other => Err(Error::Unknown {
                kind: "audio mode",
                name: other.into(),
                available: "synth-mel, synth-wav".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub languages: Vec<LanguageTag>,
    pub tasks: Vec<TaskKind>,
    pub words_per_language: usize,
    /// Inclusive character-count range of a word.
    pub word_len: (usize, usize),
    /// Inclusive word-count range of an utterance.
    pub utterance_len: (usize, usize),
    pub audio_mode: AudioMode,
    /// Mel bins of synth-mel features.
    pub n_mels: usize,
    /// Frames per character in synth-mel mode.
    pub frames_per_char: usize,
    /// Random text pairs emitted for LM pretraining.
    pub lm_text_samples: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 64,
            languages: vec![
                LanguageTag::new("eng").expect("valid"),
                LanguageTag::new("deu").expect("valid"),
            ],
            tasks: TaskKind::ALL.to_vec(),
            words_per_language: 8,
            word_len: (2, 3),
            utterance_len: (2, 3),
            audio_mode: AudioMode::SynthMel,
            n_mels: 16,
            frames_per_char: 2,
            lm_text_samples: 2048,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let needs_pairs = self.tasks.iter().any(|&k| k != TaskKind::Asr);
        if self.languages.is_empty() {
            return Err(Error::InvalidSpec("at least one language is required".into()));
        }
        if needs_pairs && self.languages.len() < 2 {
            return Err(Error::InvalidSpec(
                "SMT/SRT generation needs at least two languages".into(),
            ));
        }
        let distinct: BTreeSet<_> = self.languages.iter().collect();
        if distinct.len() != self.languages.len() {
            return Err(Error::InvalidSpec("languages must be distinct".into()));
        }
        let (wl, wh) = self.word_len;
        let (ul, uh) = self.utterance_len;
        if wl == 0 || wl > wh || ul == 0 || ul > uh {
            return Err(Error::InvalidSpec("length ranges must satisfy 1 ≤ lo ≤ hi".into()));
        }
        if self.words_per_language == 0 || self.n_mels == 0 || self.frames_per_char == 0 {
            return Err(Error::InvalidSpec("counts must be ≥ 1".into()));
        }
        let n = LETTERS.len() as f64;
        let word_space: f64 = (wl..=wh).map(|l| n.powi(l as i32)).sum();
        if (self.words_per_language as f64) > word_space {
            return Err(Error::InvalidSpec(format!(
                "cannot draw {} distinct words of length {wl}..={wh}",
                self.words_per_language
            )));
        }
        let w = self.words_per_language as f64;
        let utt_space: f64 = (ul..=uh).map(|l| w.powi(l as i32)).sum::<f64>() * self.languages.len() as f64;
        if (self.n_samples as f64) > utt_space {
            return Err(Error::InvalidSpec(format!(
                "cannot draw {} distinct utterances from {utt_space} combinations",
                self.n_samples
            )));
        }
        Ok(())
    }
}

/// Word lists aligned by index: word `i` of one language translates to word
/// `i` of every other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    fn lookup(&self, lang: &LanguageTag) -> Result<&[String]> {
        self.words
            .get(lang.code())
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidInput(format!("lexicon has no language {lang}")))
    }

    /// Word-by-word translation of a space-separated utterance.
    pub fn translate(&self, text: &str, src: &LanguageTag, tgt: &LanguageTag) -> Result<String> {
        let s = self.lookup(src)?;
        let t = self.lookup(tgt)?;
        let out: Result<Vec<&str>> = text
            .split(' ')
            .map(|w| {
                s.iter()
                    .position(|x| x == w)
                    .map(|i| t[i].as_str())
                    .ok_or_else(|| Error::InvalidInput(format!("`{w}` is not a {src} word")))
            })
            .collect();
        Ok(out?.join(" "))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// A text-only translation pair for LM pretraining.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub src: LanguageTag,
    pub tgt: LanguageTag,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub lexicon: Lexicon,
    pub manifests: BTreeMap<TaskKind, Vec<ManifestRow>>,
    pub lm_text: Vec<TextPair>,
    /// synth-mel: feature matrices keyed by utterance id.
    pub features: Tensors,
    /// synth-wav: rendered waveforms keyed by relative path.
    pub waves: BTreeMap<String, Waveform>,
}

fn draw_words(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Vec<String> {
    let letters: Vec<char> = LETTERS.chars().collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < spec.words_per_language {
        let len = rng.random_range(spec.word_len.0..=spec.word_len.1);
        let w: String = (0..len).map(|_| *letters.choose(rng).expect("non-empty")).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn draw_utterance(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Vec<usize> {
    let n = rng.random_range(spec.utterance_len.0..=spec.utterance_len.1);
    (0..n).map(|_| rng.random_range(0..spec.words_per_language)).collect()
}

fn other_language(rng: &mut ChaCha8Rng, langs: &[LanguageTag], src: usize) -> usize {
    let k = rng.random_range(0..langs.len() - 1);
    if k >= src {
        k + 1
    } else {
        k
    }
}

/// Per-character frame patterns for synth-mel audio.
fn char_patterns(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> BTreeMap<char, Matrix> {
    LETTERS
        .chars()
        .chain([' '])
        .map(|c| {
            let m = Matrix::from_shape_fn((spec.frames_per_char, spec.n_mels), |_| {
                rng.sample::<f64, _>(StandardNormal) as f32 as f64
            });
            (c, m)
        })
        .collect()
}

fn mel_for(text: &str, patterns: &BTreeMap<char, Matrix>) -> Matrix {
    let views: Vec<_> = text.chars().map(|c| patterns[&c].view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}

/// One rising chirp per character; the start frequency encodes the character.
fn chirp_for(text: &str) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let mut samples = Vec::with_capacity(text.chars().count() * CHAR_SAMPLES);
    for c in text.chars() {
        let k = LETTERS.find(c).map(|i| i + 1).unwrap_or(0) as f64;
        let f0 = 150.0 + 250.0 * k;
        let f1 = f0 + 200.0;
        let dur = CHAR_SAMPLES as f64 / sr;
        for n in 0..CHAR_SAMPLES {
            let t = n as f64 / sr;
            let phase = 2.0 * std::f64::consts::PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur));
            let amp = if c == ' ' { 0.0 } else { 0.5 };
            samples.push((amp * phase.sin()) as f32);
        }
    }
    Waveform::new(samples, SAMPLE_RATE).expect("non-empty")
}

/// Expands a spec into manifests, features and pretraining text. Pure in `spec`.
pub fn synth_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let langs = &spec.languages;
    let lexicon = Lexicon {
        words: langs
            .iter()
            .map(|l| (l.code().to_string(), draw_words(&mut rng, spec)))
            .collect(),
    };
    let words = |l: &LanguageTag, idx: &[usize]| -> String {
        let w = &lexicon.words[l.code()];
        idx.iter().map(|&i| w[i].as_str()).collect::<Vec<_>>().join(" ")
    };
    let patterns = char_patterns(&mut rng, spec);

    let mut seen = HashSet::new();
    let mut manifests: BTreeMap<TaskKind, Vec<ManifestRow>> =
        spec.tasks.iter().map(|&k| (k, Vec::new())).collect();
    let mut features = Tensors::new();
    let mut waves = BTreeMap::new();
    let mut i = 0;
    while i < spec.n_samples {
        let s = i % langs.len();
        let idx = draw_utterance(&mut rng, spec);
        let y = words(&langs[s], &idx);
        if !seen.insert(y.clone()) {
            continue;
        }
        let t = (langs.len() > 1).then(|| other_language(&mut rng, langs, s));
        let key = format!("utt{i:04}");
        let audio = match spec.audio_mode {
            AudioMode::SynthMel => {
                features.insert(key.clone(), mel_for(&y, &patterns));
                format!("{FEATURES_FILE}#{key}")
            }
            AudioMode::SynthWav => {
                let path = format!("wav/{key}.wav");
                waves.insert(path.clone(), chirp_for(&y));
                path
            }
        };
        for (&kind, rows) in manifests.iter_mut() {
            let pair = (kind != TaskKind::Asr)
                .then(|| t.map(|t| (langs[t].clone(), words(&langs[t], &idx))))
                .flatten();
            rows.push(ManifestRow {
                audio: audio.clone(),
                src: langs[s].clone(),
                transcription: y.clone(),
                tgt: pair.as_ref().map(|p| p.0.clone()),
                translation: pair.map(|p| p.1),
            });
        }
        i += 1;
    }

    let lm_text = if langs.len() > 1 {
        (0..spec.lm_text_samples)
            .map(|_| {
                let s = rng.random_range(0..langs.len());
                let t = other_language(&mut rng, langs, s);
                let idx = draw_utterance(&mut rng, spec);
                TextPair {
                    src: langs[s].clone(),
                    tgt: langs[t].clone(),
                    source: words(&langs[s], &idx),
                    target: words(&langs[t], &idx),
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        lexicon,
        manifests,
        lm_text,
        features,
        waves,
    })
}

pub fn manifest_name(kind: TaskKind) -> String {
    format!("{}.jsonl", kind.as_str())
}

pub const LM_TEXT_FILE: &str = "lm_text.jsonl";

impl SyntheticCorpus {
    /// Writes `{asr,smt,srt}.jsonl`, `lm_text.jsonl`, `lexicon.json`,
    /// `spec.json` and either `features.bin` or `wav/*.wav` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (kind, rows) in &self.manifests {
            write_manifest(&dir.join(manifest_name(*kind)), rows)?;
        }
        let mut text = String::new();
        for p in &self.lm_text {
            text.push_str(&serde_json::to_string(p)?);
            text.push('\n');
        }
        fs::write(dir.join(LM_TEXT_FILE), text)?;
        fs::write(dir.join(LEXICON_FILE), serde_json::to_string_pretty(&self.lexicon)?)?;
        fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        if !self.features.is_empty() {
            container::write(&dir.join(FEATURES_FILE), &self.features)?;
        }
        for (rel, w) in &self.waves {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            write_wav(&path, w)?;
        }
        Ok(())
    }

    /// Every distinct character appearing in the corpus text.
    pub fn chars(&self) -> BTreeSet<char> {
        let mut out = BTreeSet::new();
        for rows in self.manifests.values() {
            for r in rows {
                out.extend(r.transcription.chars());
                out.extend(r.translation.iter().flat_map(|t| t.chars()));
            }
        }
        for p in &self.lm_text {
            out.extend(p.source.chars().chain(p.target.chars()));
        }
        out
    }
}

pub fn load_lm_text(path: &Path) -> Result<Vec<TextPair>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
