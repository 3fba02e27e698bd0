use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::LanguageTag;

/// Scores for one translation direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub src: LanguageTag,
    pub tgt: LanguageTag,
    pub bleu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
}

/// Per-direction BLEU with per-source (row), per-target (column) and global
/// averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub directions: Vec<DirectionScore>,
    pub row_avg: BTreeMap<LanguageTag, f64>,
    pub col_avg: BTreeMap<LanguageTag, f64>,
    pub global_avg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer_avg: Option<f64>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn aggregate(scores: Vec<DirectionScore>) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no directions to aggregate".into()));
    }
    let mut seen = BTreeSet::new();
    for s in &scores {
        if !seen.insert((s.src.clone(), s.tgt.clone())) {
            return Err(Error::InvalidInput(format!("duplicate direction {}→{}", s.src, s.tgt)));
        }
    }
    let group = |key: &dyn Fn(&DirectionScore) -> &LanguageTag| {
        let mut m: BTreeMap<LanguageTag, Vec<f64>> = BTreeMap::new();
        for s in &scores {
            m.entry(key(s).clone()).or_default().push(s.bleu);
        }
        m.into_iter().map(|(k, v)| (k, mean(v))).collect::<BTreeMap<_, _>>()
    };
    let row_avg = group(&|s| &s.src);
    let col_avg = group(&|s| &s.tgt);
    let global_avg = mean(scores.iter().map(|s| s.bleu));
    let wers: Vec<f64> = scores.iter().filter_map(|s| s.wer).collect();
    let wer_avg = (!wers.is_empty()).then(|| mean(wers));
    Ok(EvalReport {
        directions: scores,
        row_avg,
        col_avg,
        global_avg,
        wer_avg,
    })
}

impl EvalReport {
    /// Plain-text direction matrix: sources as rows, targets as columns, an
    /// `Avg.` column and row.
    pub fn table(&self) -> String {
        let tgts: Vec<&LanguageTag> = self.col_avg.keys().collect();
        let mut out = String::new();
        let _ = write!(out, "{:<6}", "src");
        for t in &tgts {
            let _ = write!(out, "{:>8}", t.code());
        }
        let _ = writeln!(out, "{:>8}", "Avg.");
        for (src, avg) in &self.row_avg {
            let _ = write!(out, "{:<6}", src.code());
            for t in &tgts {
                match self.directions.iter().find(|d| &d.src == src && &d.tgt == *t) {
                    Some(d) => {
                        let _ = write!(out, "{:>8.1}", d.bleu);
                    }
                    None => {
                        let _ = write!(out, "{:>8}", "-");
                    }
                }
            }
            let _ = writeln!(out, "{avg:>8.1}");
        }
        let _ = write!(out, "{:<6}", "Avg.");
        for t in &tgts {
            let _ = write!(out, "{:>8.1}", self.col_avg[*t]);
        }
        let _ = writeln!(out, "{:>8.1}", self.global_avg);
        if let Some(w) = self.wer_avg {
            let _ = writeln!(out, "WER {:.2}%", 100.0 * w);
        }
        out
    }
}
