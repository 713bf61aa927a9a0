//! Token and tag vocabularies.
//!
//! Tokenization is whitespace splitting plus lowercasing over a closed
//! vocabulary. The first three ids are reserved.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const RESERVED: [&str; 3] = ["[CLS]", "[UNK]", "[MASK]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TokenVocab {
    /// Builds a vocabulary from the reserved tokens followed by every
    /// distinct word of `texts` in sorted order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase))
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(words))
            .expect("reserved prefix present")
    }

    /// Builds a vocabulary from an ordered token list; position is id.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::InvalidArgument(
                "token vocabulary must start with [CLS] [UNK] [MASK]".into(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercased whitespace tokens; unknown words map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.index.get(&w).copied().unwrap_or(UNK)
            })
            .collect()
    }

    /// Tokenizes and truncates to `max_len` tokens.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids = self.tokenize(text);
        ids.truncate(max_len);
        ids
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string))
    }
}

/// Candidate tags with their token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagVocab {
    tags: Vec<String>,
    index: BTreeMap<String, usize>,
    token_ids: Vec<Vec<usize>>,
    token_vocab_size: usize,
}

impl TagVocab {
    pub fn new(tags: Vec<String>, tokens: &TokenVocab) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut token_ids = Vec::with_capacity(tags.len());
        for (i, tag) in tags.iter().enumerate() {
            if index.insert(tag.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate tag {tag}")));
            }
            let ids = tokens.tokenize(tag);
            if ids.is_empty() || ids.contains(&UNK) {
                return Err(Error::UnknownTag(format!(
                    "{tag} does not tokenize within the token vocabulary"
                )));
            }
            token_ids.push(ids);
        }
        Ok(Self {
            tags,
            index,
            token_ids,
            token_vocab_size: tokens.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn tag(&self, id: usize) -> Option<&str> {
        self.tags.get(id).map(String::as_str)
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn tokens_of(&self, id: usize) -> Result<&[usize]> {
        self.token_ids
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownTag(id.to_string()))
    }

    pub fn token_vocab_size(&self) -> usize {
        self.token_vocab_size
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = self.tags.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, tokens: &TokenVocab) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_string).collect(), tokens)
    }
}
