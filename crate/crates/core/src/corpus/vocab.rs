use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::Dataset;
use super::io::{read_jsonl, write_jsonl};
use super::text::tokenize;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeKind {
    Diagnosis,
    Procedure,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub code: String,
    pub title: String,
    pub kind: CodeKind,
}

/// The ordered label space. Position in `entries` is the label index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeVocabulary {
    entries: Vec<CodeEntry>,
    index: HashMap<String, usize>,
}

impl CodeVocabulary {
    pub fn new(entries: Vec<CodeEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Validation("code vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.code.trim().is_empty() {
                return Err(Error::Validation(format!("code at position {i} is empty")));
            }
            if tokenize(&e.title).is_empty() {
                return Err(Error::Validation(format!("code {} has an empty title", e.code)));
            }
            if index.insert(e.code.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate code {}", e.code)));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_jsonl(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path.as_ref(), &self.entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CodeEntry] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> &CodeEntry {
        &self.entries[index]
    }

    pub fn position(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.index.contains_key(code)
    }

    /// Hex SHA-256 over `code\ttitle\tkind\n` lines in label order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            let kind = match e.kind {
                CodeKind::Diagnosis => "diagnosis",
                CodeKind::Procedure => "procedure",
            };
            h.update(format!("{}\t{}\t{}\n", e.code, e.title, kind).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Dense token ids: 0 is padding, 1 is unknown, the rest follow
/// corpus frequency (descending, then lexicographic).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocabulary {
    /// Builds from an explicit token list that must start with the two
    /// reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::Validation("token vocabulary must start with <pad>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn build(dataset: &Dataset, codes: &CodeVocabulary, min_freq: usize) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty dataset".into()));
        }
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for note in dataset.notes() {
            for t in tokenize(&note.text) {
                *counts.entry(t.text).or_default() += 1;
            }
        }
        let mut keep: BTreeMap<String, usize> =
            counts.iter().filter(|(_, &c)| c >= min_freq).map(|(t, &c)| (t.clone(), c)).collect();
        for entry in codes.entries() {
            for t in tokenize(&entry.title) {
                let c = counts.get(&t.text).copied().unwrap_or(0);
                keep.entry(t.text).or_insert(c);
            }
        }
        let mut ranked: Vec<(String, usize)> =
            keep.into_iter().filter(|(t, _)| t != PAD_TOKEN && t != UNK_TOKEN).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens)
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

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Hex SHA-256 over the tokens joined by newlines.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_slice(&raw)?;
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(&self.tokens)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}
