use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::{read_wav, FeatureExtractor, MelConfig, MelFeatures};
use crate::container;
use crate::error::{Error, Result};
use crate::task::{LanguageTag, SrtSample, TaskKind};

/// One line of a JSON-lines manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub audio: String,
    pub src: LanguageTag,
    pub transcription: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt: Option<LanguageTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
}

impl ManifestRow {
    pub fn to_sample(&self) -> Result<SrtSample> {
        SrtSample::new(
            self.audio.clone(),
            self.src.clone(),
            self.tgt.clone(),
            self.transcription.clone(),
            self.translation.clone(),
        )
    }

    pub fn audio_ref(&self) -> AudioRef {
        AudioRef::parse(&self.audio)
    }
}

/// Where an utterance's audio lives: a WAV file, or a named matrix in a
/// feature blob (`features.bin#utt0001`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AudioRef {
    Wav(PathBuf),
    Features { file: PathBuf, key: String },
}

impl AudioRef {
    pub fn parse(s: &str) -> Self {
        match s.rsplit_once('#') {
            Some((file, key)) if !key.is_empty() => AudioRef::Features {
                file: PathBuf::from(file),
                key: key.to_string(),
            },
            _ => AudioRef::Wav(PathBuf::from(s)),
        }
    }

    fn file(&self) -> &Path {
        match self {
            AudioRef::Wav(p) | AudioRef::Features { file: p, .. } => p,
        }
    }

    /// The referenced file relative to `base` (absolute paths are kept).
    pub fn resolve(&self, base: &Path) -> PathBuf {
        base.join(self.file())
    }
}

const REQUIRED: [&str; 3] = ["audio", "src", "transcription"];

/// Loads a JSON-lines manifest. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    Ok(load_numbered(path)?.into_iter().map(|(_, r)| r).collect())
}

fn load_numbered(path: &Path) -> Result<Vec<(usize, ManifestRow)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let schema_err = |msg: String| Error::Schema {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let Value::Object(obj) = &value else {
            return Err(parse_err("expected a JSON object".into()));
        };
        for field in REQUIRED {
            match obj.get(field) {
                Some(Value::String(_)) => {}
                Some(_) => return Err(schema_err(format!("field `{field}` must be a string"))),
                None => return Err(schema_err(format!("missing required field `{field}`"))),
            }
        }
        let has = |f: &str| obj.get(f).is_some_and(|v| !v.is_null());
        match (has("tgt"), has("translation")) {
            (true, false) => return Err(schema_err("`tgt` given without `translation`".into())),
            (false, true) => return Err(schema_err("`translation` given without `tgt`".into())),
            _ => {}
        }
        let row: ManifestRow = serde_json::from_value(value).map_err(|e| schema_err(e.to_string()))?;
        row.to_sample().map_err(|e| schema_err(e.to_string()))?;
        rows.push((line_no, row));
    }
    Ok(rows)
}

/// Like [`load_manifest`], additionally requiring the fields `kind` consumes.
pub fn load_task_manifest(path: &Path, kind: TaskKind) -> Result<Vec<ManifestRow>> {
    let rows = load_numbered(path)?;
    if kind != TaskKind::Asr {
        if let Some((line, _)) = rows.iter().find(|(_, r)| r.tgt.is_none()) {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("{kind} rows need `tgt` and `translation`"),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for row in rows {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Indices of rows whose audio file does not exist under `base`.
pub fn unresolved(rows: &[ManifestRow], base: &Path) -> Vec<usize> {
    rows.iter()
        .enumerate()
        .filter(|(_, r)| !r.audio_ref().resolve(base).exists())
        .map(|(i, _)| i)
        .collect()
}

/// Resolves audio references to log-mel features, caching feature blobs.
pub struct FeatureSource {
    base: PathBuf,
    extractor: FeatureExtractor,
    blobs: HashMap<PathBuf, container::Tensors>,
}

impl FeatureSource {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        Self::with_config(base, MelConfig::default())
    }

    pub fn with_config(base: impl Into<PathBuf>, cfg: MelConfig) -> Self {
        Self {
            base: base.into(),
            extractor: FeatureExtractor::new(cfg),
            blobs: HashMap::new(),
        }
    }

    pub fn load(&mut self, audio: &AudioRef) -> Result<MelFeatures> {
        let path = audio.resolve(&self.base);
        match audio {
            AudioRef::Wav(_) => self.extractor.extract(&read_wav(&path)?),
            AudioRef::Features { key, .. } => {
                if !self.blobs.contains_key(&path) {
                    let blob = container::read(&path)?;
                    self.blobs.insert(path.clone(), blob);
                }
                let m = self.blobs[&path].get(key).ok_or_else(|| {
                    Error::InvalidInput(format!("{}: no features named `{key}`", path.display()))
                })?;
                let cfg = self.extractor.config();
                MelFeatures::new(m.clone(), cfg.hop as f64 / cfg.sample_rate as f64)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(c: &str) -> LanguageTag {
        LanguageTag::new(c).unwrap()
    }

    fn write_lines(dir: &Path, lines: &[&str]) -> PathBuf {
        let p = dir.join("m.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_no_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), &[]);
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn tgt_without_translation_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            &[
                r#"{"audio":"a.wav","src":"eng","transcription":"hi"}"#,
                r#"{"audio":"b.wav","src":"eng","transcription":"hi","tgt":"deu"}"#,
            ],
        );
        match load_manifest(&p).unwrap_err() {
            Error::Schema { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            &[r#"{"audio":"a.wav","src":"eng","transcription":"hi"}"#, "", "{oops"],
        );
        match load_manifest(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_field_and_bad_tag_are_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), &[r#"{"audio":"a.wav","src":"eng"}"#]);
        assert!(matches!(load_manifest(&p), Err(Error::Schema { line: 1, .. })));
        let p = write_lines(dir.path(), &[r#"{"audio":"a.wav","src":"english","transcription":"x"}"#]);
        assert!(matches!(load_manifest(&p), Err(Error::Schema { line: 1, .. })));
        let p = write_lines(
            dir.path(),
            &[r#"{"audio":"a.wav","src":"eng","transcription":"x","tgt":"eng","translation":"y"}"#],
        );
        assert!(matches!(load_manifest(&p), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn srt_manifest_requires_target() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), &[r#"{"audio":"a.wav","src":"eng","transcription":"hi"}"#]);
        assert!(load_task_manifest(&p, TaskKind::Asr).is_ok());
        assert!(matches!(
            load_task_manifest(&p, TaskKind::Srt),
            Err(Error::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn written_rows_load_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<ManifestRow> = (0..25)
            .map(|i| ManifestRow {
                audio: format!("features.bin#utt{i:04}"),
                src: tag(if i % 2 == 0 { "eng" } else { "zho" }),
                transcription: format!("línea {i} \"quoted\" 今天"),
                tgt: (i % 3 != 0).then(|| tag("deu")),
                translation: (i % 3 != 0).then(|| format!("Zeile {i}")),
            })
            .collect();
        let p = dir.path().join("rows.jsonl");
        write_manifest(&p, &rows).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), rows);
    }

    #[test]
    fn audio_refs_parse_and_flag_missing_files() {
        assert_eq!(
            AudioRef::parse("feats/x.bin#utt7"),
            AudioRef::Features {
                file: "feats/x.bin".into(),
                key: "utt7".into()
            }
        );
        assert_eq!(AudioRef::parse("clips/a.wav"), AudioRef::Wav("clips/a.wav".into()));
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("here.wav"), b"").unwrap();
        let row = |a: &str| ManifestRow {
            audio: a.into(),
            src: tag("eng"),
            transcription: "x".into(),
            tgt: None,
            translation: None,
        };
        let rows = vec![row("here.wav"), row("gone.wav")];
        assert_eq!(unresolved(&rows, dir.path()), vec![1]);
    }
}
