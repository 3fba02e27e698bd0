use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::task::LanguageTag;

pub const MAX_ORDER: usize = 4;

/// Targets scored with the character tokenizer; all others use `13a`.
pub const CHAR_LANGUAGES: [&str; 5] = ["jpn", "kor", "tha", "yue", "zho"];

/// Splits a segment into BLEU tokens.
pub trait BleuTokenizer: Send + Sync {
    fn tokenize(&self, line: &str) -> Vec<String>;
}

/// mteval-v13a rules: unescape a few entities, pad most ASCII punctuation
/// with spaces, split `.`/`,` except inside numbers, split `-` after digits.
pub struct Tokenizer13a;

fn rules_13a() -> &'static [(Regex, &'static str); 4] {
    static RE: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RE.get_or_init(|| {
        let re = |p: &str| Regex::new(p).expect("valid pattern");
        [
            (re(r"([\{-~\[-` -&\(-\+:-@/])"), " $1 "),
            (re(r"([^0-9])([\.,])"), "$1 $2 "),
            (re(r"([\.,])([^0-9])"), " $1 $2"),
            (re(r"([0-9])(-)"), "$1 $2 "),
        ]
    })
}

impl BleuTokenizer for Tokenizer13a {
    fn tokenize(&self, line: &str) -> Vec<String> {
        let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
        if s.contains('&') {
            s = s
                .replace("&quot;", "\"")
                .replace("&amp;", "&")
                .replace("&lt;", "<")
                .replace("&gt;", ">");
        }
        let mut s = format!(" {s} ");
        for (re, rep) in rules_13a() {
            s = re.replace_all(&s, *rep).into_owned();
        }
        s.split_whitespace().map(String::from).collect()
    }
}

/// Every non-whitespace character is a token.
pub struct TokenizerChar;

impl BleuTokenizer for TokenizerChar {
    fn tokenize(&self, line: &str) -> Vec<String> {
        line.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
    }
}

pub fn bleu_tokenizers() -> Registry<dyn BleuTokenizer> {
    let mut r: Registry<dyn BleuTokenizer> = Registry::new("BLEU tokenizer");
    r.register("13a", Box::new(Tokenizer13a));
    r.register("char", Box::new(TokenizerChar));
    r
}

/// Scoring configuration: tokenizer name, exponential smoothing, order 4,
/// case-sensitive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuSignature {
    pub tokenizer: String,
}

impl BleuSignature {
    pub fn new(tokenizer: &str) -> Self {
        Self {
            tokenizer: tokenizer.to_string(),
        }
    }

    pub fn for_language(tgt: &LanguageTag) -> Self {
        Self::new(if CHAR_LANGUAGES.contains(&tgt.code()) { "char" } else { "13a" })
    }

    pub fn describe(&self) -> String {
        format!("nrefs:1|case:mixed|eff:no|tok:{}|smooth:exp", self.tokenizer)
    }
}

/// Sufficient statistics of corpus BLEU.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub correct: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
    pub sys_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn add_segment(&mut self, hyp: &[String], reference: &[String]) {
        self.sys_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.total[n - 1] += hyp.len().saturating_sub(n - 1);
            self.correct[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    /// Score in `[0, 100]` with exponential smoothing of zero-match orders.
    pub fn score(&self) -> f64 {
        let bp = if self.sys_len < self.ref_len {
            if self.sys_len > 0 {
                (1.0 - self.ref_len as f64 / self.sys_len as f64).exp()
            } else {
                0.0
            }
        } else {
            1.0
        };
        if self.correct.iter().all(|&c| c == 0) {
            return 0.0;
        }
        let mut precisions = [0.0; MAX_ORDER];
        let mut smooth = 1.0;
        for n in 0..MAX_ORDER {
            if self.total[n] == 0 {
                break;
            }
            precisions[n] = if self.correct[n] == 0 {
                smooth *= 2.0;
                100.0 / (smooth * self.total[n] as f64)
            } else {
                100.0 * self.correct[n] as f64 / self.total[n] as f64
            };
        }
        let log_sum: f64 = precisions
            .iter()
            .map(|&p| if p == 0.0 { -9_999_999_999.0 } else { p.ln() })
            .sum();
        bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

/// Corpus BLEU of line-aligned hypotheses against single references.
pub fn bleu<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H], sig: &BleuSignature) -> Result<f64> {
    Ok(bleu_stats(refs, hyps, sig)?.score())
}

pub fn bleu_stats<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H], sig: &BleuSignature) -> Result<BleuStats> {
    if refs.len() != hyps.len() {
        return Err(Error::InvalidInput(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let tokenizers = bleu_tokenizers();
    let tok = tokenizers.get(&sig.tokenizer)?;
    let mut stats = BleuStats::default();
    for (r, h) in refs.iter().zip(hyps) {
        stats.add_segment(&tok.tokenize(h.as_ref()), &tok.tokenize(r.as_ref()));
    }
    Ok(stats)
}
