use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::StepModel;

/// Deterministic pseudo-model: the logits after a history are Gaussian
/// draws (scaled by `sigma`) seeded from the prefix contents and the tokens
/// so far. With `history_free`, only the prefix and the position matter.
#[derive(Debug, Clone)]
pub struct SyntheticScorer {
    vocab: usize,
    sigma: f64,
    seed: u64,
    history_free: bool,
    slots: Vec<Option<(u64, Vec<usize>)>>,
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

impl SyntheticScorer {
    pub fn new(vocab: usize, sigma: f64, seed: u64) -> Self {
        Self {
            vocab,
            sigma,
            seed,
            history_free: false,
            slots: Vec::new(),
        }
    }

    pub fn history_free(mut self) -> Self {
        self.history_free = true;
        self
    }

    /// Next-token logits after `tokens` for a prefix keyed by `key`.
    pub fn logits_for(&self, key: u64, tokens: &[usize]) -> Vec<f64> {
        let mut h = mix(self.seed, key);
        if self.history_free {
            h = mix(h, tokens.len() as u64);
        } else {
            for &t in tokens {
                h = mix(h, t as u64 + 1);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        (0..self.vocab)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.sigma * z
            })
            .collect()
    }

    /// Key under which a prefix matrix is scored.
    pub fn prefix_key(prefix: &Matrix) -> u64 {
        let mut h = mix(prefix.nrows() as u64, prefix.ncols() as u64);
        for v in prefix.iter() {
            h = mix(h, v.to_bits());
        }
        h
    }

    fn rows(&self, slots: &[usize]) -> Matrix {
        let mut m = Matrix::zeros((slots.len(), self.vocab));
        for (i, &s) in slots.iter().enumerate() {
            let (key, toks) = self.slots[s].as_ref().expect("open slot");
            for (j, v) in self.logits_for(*key, toks).into_iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        m
    }
}

impl StepModel for SyntheticScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn state_bytes(&self, positions: usize) -> usize {
        positions * std::mem::size_of::<usize>()
    }

    fn open(&mut self, prefixes: &[Matrix]) -> Result<(Vec<usize>, Matrix)> {
        let slots: Vec<usize> = prefixes
            .iter()
            .map(|p| {
                self.slots.push(Some((Self::prefix_key(p), Vec::new())));
                self.slots.len() - 1
            })
            .collect();
        Ok((slots.clone(), self.rows(&slots)))
    }

    fn fork(&mut self, slot: usize) -> usize {
        let s = self.slots[slot].clone();
        self.slots.push(s);
        self.slots.len() - 1
    }

    fn close(&mut self, slot: usize) {
        self.slots[slot] = None;
    }

    fn extend(&mut self, slots: &[usize], tokens: &[usize]) -> Result<Matrix> {
        for (&s, &t) in slots.iter().zip(tokens) {
            if t >= self.vocab {
                return Err(Error::InvalidToken(format!("token id {t}")));
            }
            match self.slots.get_mut(s) {
                Some(Some((_, toks))) => toks.push(t),
                _ => return Err(Error::InvalidInput(format!("slot {s} is not open"))),
            }
        }
        Ok(self.rows(slots))
    }
}
