use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::tensor::ops::{argmax, log_softmax};
use crate::tensor::Matrix;

/// Incremental next-token scorer. Sequences live in numbered slots owned by
/// the model; strategies open, fork, extend and close them.
pub trait StepModel {
    fn vocab_size(&self) -> usize;

    /// Bytes of state one sequence holds after `positions` positions.
    fn state_bytes(&self, positions: usize) -> usize;

    /// Opens one sequence per prefix; returns the slots and the next-token
    /// logits (one row per prefix).
    fn open(&mut self, prefixes: &[Matrix]) -> Result<(Vec<usize>, Matrix)>;

    /// Copies a sequence into a new slot.
    fn fork(&mut self, slot: usize) -> usize;

    fn close(&mut self, slot: usize);

    /// Appends `tokens[i]` to `slots[i]`; returns the next-token logits.
    fn extend(&mut self, slots: &[usize], tokens: &[usize]) -> Result<Matrix>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Registry name (`greedy`, `beam`).
    pub strategy: String,
    pub beam_size: usize,
    pub max_new_tokens: usize,
    pub length_penalty: f64,
    pub eos_id: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: "beam".into(),
            beam_size: 5,
            max_new_tokens: 64,
            length_penalty: 1.0,
            eos_id: 2,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self {
            strategy: "greedy".into(),
            beam_size: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("beam_size and max_new_tokens must be ≥ 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::InvalidConfig("length_penalty must be finite".into()));
        }
        Ok(())
    }

    /// Hypotheses held per input at once.
    pub fn width(&self) -> usize {
        if self.strategy == "greedy" {
            1
        } else {
            self.beam_size
        }
    }
}

/// Generated tokens (EOS excluded) and their summed log-probability
/// (EOS included).
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Budget exhausted before EOS.
    pub truncated: bool,
}

pub trait DecodeStrategy: Send + Sync {
    fn decode(&self, model: &mut dyn StepModel, prefixes: &[Matrix], cfg: &DecodeConfig) -> Result<Vec<Generation>>;
}

pub fn decode_strategies() -> Registry<dyn DecodeStrategy> {
    let mut r: Registry<dyn DecodeStrategy> = Registry::new("decode strategy");
    r.register("greedy", Box::new(Greedy));
    r.register("beam", Box::new(Beam));
    r
}

fn check_vocab(model: &dyn StepModel, cfg: &DecodeConfig) -> Result<()> {
    if cfg.eos_id >= model.vocab_size() {
        return Err(Error::InvalidConfig(format!(
            "eos id {} outside vocabulary of {}",
            cfg.eos_id,
            model.vocab_size()
        )));
    }
    Ok(())
}

/// Argmax at every step until EOS or the budget.
pub struct Greedy;

impl DecodeStrategy for Greedy {
    fn decode(&self, model: &mut dyn StepModel, prefixes: &[Matrix], cfg: &DecodeConfig) -> Result<Vec<Generation>> {
        cfg.validate()?;
        check_vocab(model, cfg)?;
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let (slots, mut logits) = model.open(prefixes)?;
        let mut out: Vec<Generation> = (0..prefixes.len())
            .map(|_| Generation {
                tokens: Vec::new(),
                log_prob: 0.0,
                truncated: true,
            })
            .collect();
        // Items still generating, aligned with the rows of `logits`.
        let mut active: Vec<usize> = (0..prefixes.len()).collect();
        for _ in 0..cfg.max_new_tokens {
            let mut next_items = Vec::new();
            let mut next_tokens = Vec::new();
            for (row, &item) in active.iter().enumerate() {
                let lp = log_softmax(logits.row(row).as_slice().expect("contiguous"));
                let t = argmax(&lp);
                let g = &mut out[item];
                g.log_prob += lp[t];
                if t == cfg.eos_id {
                    g.truncated = false;
                    model.close(slots[item]);
                } else {
                    g.tokens.push(t);
                    next_items.push(item);
                    next_tokens.push(t);
                }
            }
            active = next_items;
            if active.is_empty() || out[active[0]].tokens.len() == cfg.max_new_tokens {
                break;
            }
            let s: Vec<usize> = active.iter().map(|&i| slots[i]).collect();
            logits = model.extend(&s, &next_tokens)?;
        }
        for &i in &active {
            model.close(slots[i]);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct Hyp {
    slot: usize,
    tokens: Vec<usize>,
    log_prob: f64,
}

#[derive(Debug, Clone)]
struct Finished {
    tokens: Vec<usize>,
    log_prob: f64,
    score: f64,
    truncated: bool,
}

fn normalized(log_prob: f64, len: usize, penalty: f64) -> f64 {
    log_prob / (len as f64).powf(penalty)
}

/// Higher score first; ties go to the lexicographically smaller sequence.
fn better(a: &Finished, b: &Finished) -> bool {
    match a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.tokens < b.tokens,
    }
}

/// Length-normalized beam search. Each step ranks every (hypothesis, token)
/// extension by summed log-probability and keeps the best `beam_size`;
/// extensions ending in EOS move to a finished pool. Search stops when no
/// hypothesis is alive, the budget is spent, or the pool is full and no
/// alive hypothesis can still beat its worst member. The answer is the best
/// normalized score over finished and budget-truncated hypotheses, where
/// length counts the EOS token.
pub struct Beam;

struct ItemState {
    alive: Vec<Hyp>,
    finished: Vec<Finished>,
    done: bool,
}

impl ItemState {
    fn can_improve(&self, cfg: &DecodeConfig) -> bool {
        if self.finished.len() < cfg.beam_size || cfg.length_penalty < 0.0 {
            return true;
        }
        let worst = self
            .finished
            .iter()
            .map(|f| f.score)
            .fold(f64::INFINITY, f64::min);
        // Log-probabilities only fall as tokens are added, so the best an
        // alive hypothesis can reach is its current sum at the longest length.
        self.alive
            .iter()
            .any(|h| normalized(h.log_prob, cfg.max_new_tokens, cfg.length_penalty) > worst)
    }
}

impl DecodeStrategy for Beam {
    fn decode(&self, model: &mut dyn StepModel, prefixes: &[Matrix], cfg: &DecodeConfig) -> Result<Vec<Generation>> {
        cfg.validate()?;
        check_vocab(model, cfg)?;
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let v = model.vocab_size();
        let (slots, mut logits) = model.open(prefixes)?;
        let mut items: Vec<ItemState> = slots
            .iter()
            .map(|&slot| ItemState {
                alive: vec![Hyp {
                    slot,
                    tokens: Vec::new(),
                    log_prob: 0.0,
                }],
                finished: Vec::new(),
                done: false,
            })
            .collect();

        for step in 0..cfg.max_new_tokens {
            let mut row = 0;
            let mut ext_slots = Vec::new();
            let mut ext_tokens = Vec::new();
            for item in items.iter_mut().filter(|it| !it.done) {
                let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(item.alive.len() * v);
                for (a, h) in item.alive.iter().enumerate() {
                    let lp = log_softmax(logits.row(row).as_slice().expect("contiguous"));
                    row += 1;
                    cands.extend(lp.iter().enumerate().map(|(t, &l)| (h.log_prob + l, a, t)));
                }
                cands.sort_by(|x, y| {
                    y.0.partial_cmp(&x.0)
                        .unwrap_or(Ordering::Equal)
                        .then_with(|| item.alive[x.1].tokens.cmp(&item.alive[y.1].tokens))
                        .then(x.2.cmp(&y.2))
                });
                cands.truncate(cfg.beam_size);

                let mut used = vec![false; item.alive.len()];
                let mut next = Vec::new();
                for &(lp, a, t) in &cands {
                    let parent = &item.alive[a];
                    let mut tokens = parent.tokens.clone();
                    if t == cfg.eos_id {
                        item.finished.push(Finished {
                            score: normalized(lp, tokens.len() + 1, cfg.length_penalty),
                            tokens,
                            log_prob: lp,
                            truncated: false,
                        });
                        continue;
                    }
                    tokens.push(t);
                    let slot = if used[a] {
                        model.fork(parent.slot)
                    } else {
                        used[a] = true;
                        parent.slot
                    };
                    next.push(Hyp {
                        slot,
                        tokens,
                        log_prob: lp,
                    });
                }
                for (h, u) in item.alive.iter().zip(&used) {
                    if !u {
                        model.close(h.slot);
                    }
                }
                item.alive = next;
                let last_step = step + 1 == cfg.max_new_tokens;
                if item.alive.is_empty() || last_step || !item.can_improve(cfg) {
                    item.done = true;
                    for h in item.alive.drain(..) {
                        if last_step {
                            item.finished.push(Finished {
                                score: normalized(h.log_prob, h.tokens.len(), cfg.length_penalty),
                                tokens: h.tokens,
                                log_prob: h.log_prob,
                                truncated: true,
                            });
                        }
                        model.close(h.slot);
                    }
                } else {
                    for h in &item.alive {
                        ext_slots.push(h.slot);
                        ext_tokens.push(*h.tokens.last().expect("non-empty"));
                    }
                }
            }
            if ext_slots.is_empty() {
                break;
            }
            logits = model.extend(&ext_slots, &ext_tokens)?;
        }

        Ok(items
            .into_iter()
            .map(|it| {
                let best = it
                    .finished
                    .into_iter()
                    .reduce(|a, b| if better(&b, &a) { b } else { a })
                    .expect("every item finishes at least one hypothesis");
                Generation {
                    tokens: best.tokens,
                    log_prob: best.log_prob,
                    truncated: best.truncated,
                }
            })
            .collect())
    }
}
