use std::collections::HashMap;

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters. Names are slash-separated with the namespace first
/// (`adapter/...`, `llm/...`, `llm_lora/...`, `encoder/...`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> + '_ {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar values across parameters whose name starts with `prefix`.
    pub fn count_values(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, v)| v.len())
            .sum()
    }

    /// Replaces a parameter's value, checking that the shape is unchanged.
    pub fn assign(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
        let cur = &mut self.values[id.0];
        if cur.dim() != value.dim() {
            return Err(Error::ConfigMismatch(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                cur.dim(),
                value.dim()
            )));
        }
        *cur = value;
        Ok(())
    }

    pub fn mask(&self, select: impl Fn(&str) -> bool) -> ParamMask {
        ParamMask(self.names.iter().map(|n| select(n)).collect())
    }
}

/// Which parameters receive gradients in a [`super::Graph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMask(Vec<bool>);

impl ParamMask {
    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.0.get(id.0).copied().unwrap_or(false)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| ParamId(i))
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}
