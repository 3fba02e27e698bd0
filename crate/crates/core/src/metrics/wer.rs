use super::normalize;
use crate::error::{Error, Result};

/// Levenshtein distance between token sequences (unit costs).
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus WER: total word edits over total reference words, after
/// [`normalize`].
pub fn wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::InvalidInput(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut edits = 0;
    let mut words = 0;
    for (r, h) in refs.iter().zip(hyps) {
        let r = normalize(r.as_ref());
        let h = normalize(h.as_ref());
        let rw: Vec<&str> = r.split_whitespace().collect();
        let hw: Vec<&str> = h.split_whitespace().collect();
        edits += edit_distance(&rw, &hw);
        words += rw.len();
    }
    if words == 0 {
        return Err(Error::InvalidInput("references contain no words".into()));
    }
    Ok(edits as f64 / words as f64)
}
