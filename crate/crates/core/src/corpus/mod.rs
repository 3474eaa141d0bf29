//! Notes, codes, tokenization, dataset files and the synthetic generator.
//!
//! A corpus directory holds [`NOTES_FILE`], [`CODES_FILE`] and, for
//! synthetic corpora, [`TRIGGERS_FILE`].

mod dataset;
mod io;
mod synthetic;
mod text;
mod vocab;

pub use dataset::{load_triggers, save_triggers, Dataset, Note, TriggerSpan};
pub use io::{read_jsonl, write_jsonl};
pub use synthetic::{generate_synthetic_corpus, zipf_weights, CountRange, SyntheticCorpus, SyntheticSpec};
pub use text::{is_sentence_separator, segment_sentences, tokenize, Token};
pub use vocab::{CodeEntry, CodeKind, CodeVocabulary, TokenVocabulary, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};

use std::path::Path;

use crate::error::{Error, Result};

pub const NOTES_FILE: &str = "notes.jsonl";
pub const CODES_FILE: &str = "codes.jsonl";
pub const TRIGGERS_FILE: &str = "triggers.jsonl";

/// Loads the notes and code vocabulary of a corpus directory.
pub fn load_corpus_dir(dir: impl AsRef<Path>) -> Result<(Dataset, CodeVocabulary)> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Input(format!("{} is not a corpus directory", dir.display())));
    }
    let codes = CodeVocabulary::load(dir.join(CODES_FILE))?;
    let dataset = Dataset::load(dir.join(NOTES_FILE), &codes)?;
    Ok((dataset, codes))
}

impl SyntheticCorpus {
    /// Writes notes, codes and trigger spans into `dir`, creating it.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.dataset.save(dir.join(NOTES_FILE))?;
        self.codes.save(dir.join(CODES_FILE))?;
        save_triggers(dir.join(TRIGGERS_FILE), &self.triggers)
    }
}
