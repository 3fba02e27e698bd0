//! Instruction/target construction for the three tasks and the SRT output
//! parser.
//!
//! | task | instruction              | target                         |
//! |------|--------------------------|--------------------------------|
//! | ASR  | `<|src|>`                | `Y`                            |
//! | SMT  | `Y<|src|><|tgt|>`        | `Z`                            |
//! | SRT  | `<|src|><|tgt|>`         | `Y<|src|><|tgt|>Z`             |

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN_TAGS: &str = include_str!("../data/language_tags.tsv");

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageTag {
    code: String,
}

impl LanguageTag {
    /// Accepts a three-letter lowercase ISO 639-3 code. Membership in a
    /// registry is checked separately by [`TagRegistry::get`].
    pub fn new(code: &str) -> Result<Self> {
        if code.len() == 3 && code.bytes().all(|b| b.is_ascii_lowercase()) {
            Ok(Self { code: code.to_string() })
        } else {
            Err(Error::InvalidInput(format!(
                "`{code}` is not a three-letter ISO 639-3 code"
            )))
        }
    }

    pub fn code(&self) -> &str {
        &self.code
    }

    pub fn surface(&self) -> String {
        format!("<|{}|>", self.code)
    }

    /// Parses `<|xxx|>` back into a tag.
    pub fn from_surface(s: &str) -> Result<Self> {
        s.strip_prefix("<|")
            .and_then(|r| r.strip_suffix("|>"))
            .ok_or_else(|| Error::InvalidInput(format!("`{s}` is not a tag surface")))
            .and_then(Self::new)
    }
}

impl TryFrom<String> for LanguageTag {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::new(&s)
    }
}

impl From<LanguageTag> for String {
    fn from(t: LanguageTag) -> String {
        t.code
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code)
    }
}

/// Regex matching any tag surface form.
pub fn tag_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<\|[a-z]{3}\|>").unwrap())
}

pub fn contains_tag(text: &str) -> bool {
    tag_pattern().is_match(text)
}

/// The set of languages the system accepts, loaded from a versioned table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagRegistry {
    version: u32,
    tags: Vec<LanguageTag>,
}

impl TagRegistry {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TAGS).expect("embedded tag table is valid")
    }

    /// Parses `code<TAB>surface` lines; `# version<TAB>N` sets the version.
    pub fn parse(text: &str) -> Result<Self> {
        let mut version = 0;
        let mut tags = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut it = rest.split_whitespace();
                if it.next() == Some("version") {
                    version = it.next().and_then(|v| v.parse().ok()).unwrap_or(0);
                }
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(code), Some(surface)) = (cols.next(), cols.next()) else {
                return Err(Error::InvalidInput(format!(
                    "tag table line {}: expected `code<TAB>surface`",
                    no + 1
                )));
            };
            let tag = LanguageTag::new(code)?;
            if tag.surface() != surface {
                return Err(Error::InvalidInput(format!(
                    "tag table line {}: surface `{surface}` does not match code `{code}`",
                    no + 1
                )));
            }
            if !tags.contains(&tag) {
                tags.push(tag);
            }
        }
        Ok(Self { version, tags })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn tags(&self) -> &[LanguageTag] {
        &self.tags
    }

    pub fn codes(&self) -> Vec<&str> {
        self.tags.iter().map(|t| t.code()).collect()
    }

    pub fn register(&mut self, code: &str) -> Result<LanguageTag> {
        let tag = LanguageTag::new(code)?;
        if !self.tags.contains(&tag) {
            self.tags.push(tag.clone());
        }
        Ok(tag)
    }

    pub fn get(&self, code: &str) -> Result<LanguageTag> {
        self.tags
            .iter()
            .find(|t| t.code() == code)
            .cloned()
            .ok_or_else(|| Error::Unknown {
                kind: "language tag",
                name: code.to_string(),
                available: self.codes().join(", "),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Asr,
    Smt,
    Srt,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Asr, TaskKind::Smt, TaskKind::Srt];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Asr => "asr",
            TaskKind::Smt => "smt",
            TaskKind::Srt => "srt",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asr" => Ok(TaskKind::Asr),
            "smt" => Ok(TaskKind::Smt),
            "srt" => Ok(TaskKind::Srt),
            other => Err(Error::Unknown {
                kind: "task",
                name: other.to_string(),
                available: "asr, smt, srt".into(),
            }),
        }
    }
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrtSample {
    pub audio_ref: String,
    pub src: LanguageTag,
    pub tgt: Option<LanguageTag>,
    pub transcription: String,
    pub translation: Option<String>,
}

impl SrtSample {
    pub fn new(
        audio_ref: impl Into<String>,
        src: LanguageTag,
        tgt: Option<LanguageTag>,
        transcription: impl Into<String>,
        translation: Option<String>,
    ) -> Result<Self> {
        let s = Self {
            audio_ref: audio_ref.into(),
            src,
            tgt,
            transcription: transcription.into(),
            translation,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tgt.as_ref() == Some(&self.src) {
            return Err(Error::InvalidSample(format!(
                "source and target language are both `{}`",
                self.src
            )));
        }
        if contains_tag(&self.transcription) {
            return Err(Error::InvalidSample(
                "transcription contains a language tag".into(),
            ));
        }
        if self.translation.as_deref().is_some_and(contains_tag) {
            return Err(Error::InvalidSample(
                "translation contains a language tag".into(),
            ));
        }
        Ok(())
    }

    fn pair(&self, kind: TaskKind) -> Result<(&LanguageTag, &str)> {
        let tgt = self.tgt.as_ref().ok_or_else(|| {
            Error::InvalidSample(format!("{kind} needs a target language"))
        })?;
        let z = self.translation.as_deref().ok_or_else(|| {
            Error::InvalidSample(format!("{kind} needs a translation"))
        })?;
        Ok((tgt, z))
    }
}

pub fn build_instruction(kind: TaskKind, s: &SrtSample) -> Result<String> {
    let src = s.src.surface();
    Ok(match kind {
        TaskKind::Asr => src,
        TaskKind::Smt => {
            let (tgt, _) = s.pair(kind)?;
            format!("{}{src}{}", s.transcription, tgt.surface())
        }
        TaskKind::Srt => {
            let (tgt, _) = s.pair(kind)?;
            format!("{src}{}", tgt.surface())
        }
    })
}

pub fn build_target(kind: TaskKind, s: &SrtSample) -> Result<String> {
    Ok(match kind {
        TaskKind::Asr => s.transcription.clone(),
        TaskKind::Smt => s.pair(kind)?.1.to_string(),
        TaskKind::Srt => {
            let (tgt, z) = s.pair(kind)?;
            format!("{}{}{}{z}", s.transcription, s.src.surface(), tgt.surface())
        }
    })
}

/// Splits an SRT generation at the first `<|src|><|tgt|>` pair.
pub fn parse_srt_output(
    text: &str,
    src: &LanguageTag,
    tgt: &LanguageTag,
) -> Result<(String, String)> {
    let delimiter = format!("{}{}", src.surface(), tgt.surface());
    match text.find(&delimiter) {
        Some(i) => Ok((
            text[..i].to_string(),
            text[i + delimiter.len()..].to_string(),
        )),
        None => Err(Error::ParseMiss {
            raw: text.to_string(),
            delimiter,
        }),
    }
}

/// Like [`parse_srt_output`], but a missing delimiter scores the whole output
/// as the translation with an empty transcription. The flag reports the miss.
pub fn split_srt_output(text: &str, src: &LanguageTag, tgt: &LanguageTag) -> (String, String, bool) {
    match parse_srt_output(text, src, tgt) {
        Ok((y, z)) => (y, z, false),
        Err(_) => (String::new(), text.to_string(), true),
    }
}
