use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vcubench::{IdentitySpec, HUE_NAMES, SHAPE_NAMES};

pub const PAD: &str = "<pad>";
pub const UNKNOWN: &str = "unknown";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Unique tokens in first-seen order, `<pad>` and `unknown` first.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens = vec![PAD.to_string(), UNKNOWN.to_string()];
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid token {w:?}")));
            }
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len());
                tokens.push(w.to_string());
            }
        }
        Ok(Self { tokens, index })
    }

    /// Names, attribute words, and every word of the given texts.
    pub fn for_roster<'a>(
        roster: &[IdentitySpec],
        texts: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut words: Vec<String> = roster.iter().flat_map(|s| s.name.iter().cloned()).collect();
        words.extend(SHAPE_NAMES.iter().chain(HUE_NAMES.iter()).map(|s| s.to_string()));
        for t in texts {
            words.extend(t.split_whitespace().filter(|w| !w.contains('{')).map(str::to_string));
        }
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn unknown(&self) -> usize {
        1
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("unknown token '{token}'")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("token index {id} out of range {}", self.len())))
    }

    /// Whitespace tokenisation; every word must be known.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(str::to_string)).collect()
    }

    pub fn concept(&self, spec: &IdentitySpec) -> Result<ConceptVocab> {
        ConceptVocab::new(
            spec.id.clone(),
            spec.name.iter().map(|t| self.id(t)).collect::<Result<Vec<_>>>()?,
            self.len(),
        )
    }
}

/// The token set V(y) whose logits express concept `y`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVocab {
    pub concept: String,
    pub tokens: Vec<usize>,
}

impl ConceptVocab {
    pub fn new(concept: String, tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Contract(format!("concept '{concept}' has no tokens")));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Vocab(format!("token index {t} out of range {vocab_size}")));
        }
        Ok(Self { concept, tokens })
    }
}
