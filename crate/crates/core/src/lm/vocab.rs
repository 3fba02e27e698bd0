use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::task::{tag_pattern, LanguageTag, TagRegistry};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Character-level vocabulary with atomic language-tag tokens.
///
/// Layout: `<pad>`, `<s>`, `</s>`, then one token per registered tag, then
/// the characters in code-point order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build(chars: impl IntoIterator<Item = char>, tags: &TagRegistry) -> Self {
        let mut tokens = vec![PAD.to_string(), BOS.to_string(), EOS.to_string()];
        tokens.extend(tags.tags().iter().map(LanguageTag::surface));
        let chars: BTreeSet<char> = chars.into_iter().filter(|c| !c.is_control()).collect();
        tokens.extend(chars.into_iter().map(String::from));
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != BOS || tokens[2] != EOS {
            return Err(Error::InvalidInput(
                "vocabulary must start with <pad>, <s>, </s>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token `{t}`")));
            }
            let is_special = i < 3 || tag_pattern().is_match(t);
            if !is_special && t.chars().count() != 1 {
                return Err(Error::InvalidInput(format!("token `{t}` is not a single character")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tag_id(&self, tag: &LanguageTag) -> Result<usize> {
        self.id(&tag.surface())
            .ok_or_else(|| Error::InvalidToken(format!("tag {} is not in the vocabulary", tag.surface())))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tag surfaces become single tokens, everything else is split into characters.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(text.len());
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            if c == '<' {
                if let Some(m) = tag_pattern().find(rest).filter(|m| m.start() == 0) {
                    if let Some(id) = self.id(m.as_str()) {
                        ids.push(id);
                        rest = &rest[m.end()..];
                        continue;
                    }
                }
            }
            let mut buf = [0u8; 4];
            let id = self
                .id(c.encode_utf8(&mut buf))
                .ok_or_else(|| Error::InvalidToken(format!("character {c:?} is not in the vocabulary")))?;
            ids.push(id);
            rest = &rest[c.len_utf8()..];
        }
        Ok(ids)
    }

    /// Concatenates token surfaces; `<pad>`, `<s>` and `</s>` render as nothing.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i > 2)
            .filter_map(|&i| self.token(i))
            .collect()
    }
}
