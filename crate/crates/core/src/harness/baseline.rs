use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, CodeVocabulary};
use crate::error::{Error, Result};
use crate::train::micro_jaccard;

/// Codes one human coder assigned to one note.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoderAnnotation {
    pub note_id: String,
    pub coder_id: String,
    pub codes: BTreeSet<String>,
}

impl CoderAnnotation {
    pub fn validate(&self, vocabulary: &CodeVocabulary) -> Result<()> {
        match self.codes.iter().find(|c| !vocabulary.contains(c)) {
            Some(c) => Err(Error::Validation(format!(
                "coder {} assigned unknown code {c} to note {}",
                self.coder_id, self.note_id
            ))),
            None => Ok(()),
        }
    }
}

pub fn load_coder_annotations(path: impl AsRef<Path>, vocabulary: &CodeVocabulary) -> Result<Vec<CoderAnnotation>> {
    let out: Vec<CoderAnnotation> = read_jsonl(path.as_ref())?;
    for a in &out {
        a.validate(vocabulary)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub notes: usize,
    pub annotations: usize,
    pub human_mj: f64,
    pub system_mj: f64,
    /// `system_mj / human_mj`; `None` when `human_mj` is zero.
    pub ratio: Option<f64>,
}

pub fn ratio(system_mj: f64, human_mj: f64) -> Option<f64> {
    (human_mj > 0.0).then(|| system_mj / human_mj)
}

/// Micro-Jaccard of coders and of the system against the reference, over
/// the notes the coders annotated. Every annotation is one coder pair; the
/// system contributes one pair per distinct annotated note.
pub fn human_baseline_compare(
    coders: &[CoderAnnotation],
    reference: &BTreeMap<String, BTreeSet<String>>,
    system: &BTreeMap<String, BTreeSet<String>>,
) -> Result<BaselineReport> {
    if coders.is_empty() {
        return Err(Error::Contract("no coder annotations".into()));
    }
    let notes: BTreeSet<&str> = coders.iter().map(|a| a.note_id.as_str()).collect();
    let missing = |side: &BTreeMap<String, BTreeSet<String>>| -> Vec<&str> {
        notes.iter().copied().filter(|n| !side.contains_key(*n)).collect()
    };
    let (no_ref, no_sys) = (missing(reference), missing(system));
    if !no_ref.is_empty() || !no_sys.is_empty() {
        return Err(Error::Contract(format!(
            "coverage mismatch: missing from reference {no_ref:?}, missing from system {no_sys:?}"
        )));
    }
    let human: Vec<_> = coders.iter().map(|a| (a.codes.clone(), reference[&a.note_id].clone())).collect();
    let sys: Vec<_> = notes.iter().map(|n| (system[*n].clone(), reference[*n].clone())).collect();
    let human_mj = micro_jaccard(&human)?;
    let system_mj = micro_jaccard(&sys)?;
    Ok(BaselineReport {
        notes: notes.len(),
        annotations: coders.len(),
        human_mj,
        system_mj,
        ratio: ratio(system_mj, human_mj),
    })
}
