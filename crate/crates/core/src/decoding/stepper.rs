use crate::error::{Error, Result};
use crate::lm::{KvCache, LanguageModel};
use crate::tensor::{Matrix, ParamStore};

use super::StepModel;

/// [`StepModel`] over a language model with one KV cache per slot.
pub struct LmStepper<'a> {
    lm: &'a LanguageModel,
    store: &'a ParamStore,
    slots: Vec<Option<KvCache>>,
    free: Vec<usize>,
}

impl<'a> LmStepper<'a> {
    pub fn new(lm: &'a LanguageModel, store: &'a ParamStore) -> Self {
        Self {
            lm,
            store,
            slots: Vec::new(),
            free: Vec::new(),
        }
    }

    /// Slots currently holding a sequence.
    pub fn live(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    fn insert(&mut self, cache: KvCache) -> usize {
        match self.free.pop() {
            Some(i) => {
                self.slots[i] = Some(cache);
                i
            }
            None => {
                self.slots.push(Some(cache));
                self.slots.len() - 1
            }
        }
    }

    fn run(&mut self, slots: &[usize], chunks: &[Matrix]) -> Result<Matrix> {
        let mut taken = Vec::with_capacity(slots.len());
        for &s in slots {
            match self.slots.get_mut(s).and_then(Option::take) {
                Some(c) => taken.push(c),
                None => {
                    for (&back, c) in slots.iter().zip(taken) {
                        self.slots[back] = Some(c);
                    }
                    return Err(Error::InvalidInput(format!("slot {s} is not open")));
                }
            }
        }
        let mut refs: Vec<&mut KvCache> = taken.iter_mut().collect();
        let out = self.lm.extend(self.store, &mut refs, chunks);
        for (&s, c) in slots.iter().zip(taken) {
            self.slots[s] = Some(c);
        }
        out
    }
}

impl StepModel for LmStepper<'_> {
    fn vocab_size(&self) -> usize {
        self.lm.vocab_size()
    }

    fn state_bytes(&self, positions: usize) -> usize {
        let cfg = self.lm.config();
        2 * cfg.n_layers * positions * cfg.d_model * std::mem::size_of::<f64>()
    }

    fn open(&mut self, prefixes: &[Matrix]) -> Result<(Vec<usize>, Matrix)> {
        let slots: Vec<usize> = prefixes.iter().map(|_| self.insert(self.lm.new_cache())).collect();
        match self.run(&slots, prefixes) {
            Ok(logits) => Ok((slots, logits)),
            Err(e) => {
                for &s in &slots {
                    self.close(s);
                }
                Err(e)
            }
        }
    }

    fn fork(&mut self, slot: usize) -> usize {
        let c = self.slots[slot].clone().expect("fork of a closed slot");
        self.insert(c)
    }

    fn close(&mut self, slot: usize) {
        if self.slots[slot].take().is_some() {
            self.free.push(slot);
        }
    }

    fn extend(&mut self, slots: &[usize], tokens: &[usize]) -> Result<Matrix> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.lm.vocab_size()) {
            return Err(Error::InvalidToken(format!("token id {t}")));
        }
        let rows: Vec<Matrix> = tokens.iter().map(|&t| self.lm.token_embedding(self.store, t)).collect();
        self.run(slots, &rows)
    }
}
