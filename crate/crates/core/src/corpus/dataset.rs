use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{read_jsonl, write_jsonl};
use super::text::segment_sentences;
use super::vocab::CodeVocabulary;
use crate::error::{Error, Result};

/// A clinical document with its gold code set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Note {
    pub id: String,
    pub text: String,
    pub gold_codes: BTreeSet<String>,
    sentences: Vec<Range<usize>>,
}

impl Note {
    pub fn new<I, S>(id: impl Into<String>, text: impl Into<String>, codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Validation("note id is empty".into()));
        }
        let text = text.into();
        let sentences = segment_sentences(&text);
        Ok(Self { id, text, gold_codes: codes.into_iter().map(Into::into).collect(), sentences })
    }

    /// Sentence byte ranges, ordered and disjoint.
    pub fn sentences(&self) -> &[Range<usize>] {
        &self.sentences
    }
}

#[derive(Serialize, Deserialize)]
struct NoteRecord {
    id: String,
    text: String,
    codes: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    notes: Vec<Note>,
}

impl Dataset {
    pub fn new(notes: Vec<Note>) -> Self {
        Self { notes }
    }

    pub fn notes(&self) -> &[Note] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Note> {
        self.notes.iter().find(|n| n.id == id)
    }

    /// Keeps the notes at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.notes[i].clone()).collect())
    }

    /// Every gold code must exist in `codes`.
    pub fn validate(&self, codes: &CodeVocabulary) -> Result<()> {
        let unknown: BTreeSet<&str> = self
            .notes
            .iter()
            .flat_map(|n| n.gold_codes.iter())
            .filter(|c| !codes.contains(c))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "unknown gold codes: {}",
                unknown.into_iter().collect::<Vec<_>>().join(", ")
            )))
        }
    }

    pub fn load(path: impl AsRef<Path>, codes: &CodeVocabulary) -> Result<Self> {
        let records: Vec<NoteRecord> = read_jsonl(path.as_ref())?;
        let notes = records.into_iter().map(|r| Note::new(r.id, r.text, r.codes)).collect::<Result<Vec<_>>>()?;
        let ds = Dataset::new(notes);
        ds.validate(codes)?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let records: Vec<NoteRecord> = self
            .notes
            .iter()
            .map(|n| NoteRecord {
                id: n.id.clone(),
                text: n.text.clone(),
                codes: n.gold_codes.iter().cloned().collect(),
            })
            .collect();
        write_jsonl(path.as_ref(), &records)
    }
}

/// Ground-truth location of a planted trigger phrase.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerSpan {
    pub note_id: String,
    pub code: String,
    pub start: usize,
    pub end: usize,
}

pub fn load_triggers(path: impl AsRef<Path>) -> Result<Vec<TriggerSpan>> {
    read_jsonl(path.as_ref())
}

pub fn save_triggers(path: impl AsRef<Path>, spans: &[TriggerSpan]) -> Result<()> {
    write_jsonl(path.as_ref(), spans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CodeEntry, CodeKind};

    fn codes() -> CodeVocabulary {
        CodeVocabulary::new(vec![CodeEntry {
            code: "401.9".into(),
            title: "Essential hypertension".into(),
            kind: CodeKind::Diagnosis,
        }])
        .unwrap()
    }

    #[test]
    fn loads_one_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.jsonl");
        std::fs::write(&path, "{\"id\":\"n1\",\"text\":\"x.\",\"codes\":[\"401.9\"]}\n").unwrap();
        let ds = Dataset::load(&path, &codes()).unwrap();
        assert_eq!(ds.len(), 1);
        let n = &ds.notes()[0];
        assert_eq!(n.id, "n1");
        assert_eq!(n.text, "x.");
        assert!(n.gold_codes.contains("401.9"));
        assert_eq!(n.sentences(), &[0..1]);
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.jsonl");
        std::fs::write(&path, "{\"id\":\"n1\",\"text\":\"x.\",\"codes\":[]}\n{\"id\":\"n2\",\"codes\":[]}\n").unwrap();
        match Dataset::load(&path, &codes()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("text"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_codes_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.jsonl");
        std::fs::write(&path, "{\"id\":\"n1\",\"text\":\"x.\",\"codes\":[\"999\",\"123\"]}\n").unwrap();
        let err = Dataset::load(&path, &codes()).unwrap_err().to_string();
        assert!(err.contains("123, 999"), "{err}");
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.jsonl");
        let ds = Dataset::new(vec![
            Note::new("a", "Chest pain. BP 140/90!", ["401.9"]).unwrap(),
            Note::new("b", "quiet\nnight", Vec::<String>::new()).unwrap(),
        ]);
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path, &codes()).unwrap(), ds);
    }
}
