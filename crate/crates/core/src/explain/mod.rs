//! Evidence snippets for predicted codes.
//!
//! Two extractors share one output type. [`extract_snippets_attn`] reads the
//! model's label-wise attention and returns the sentences around attention
//! peaks. [`extract_snippets_kd`] uses per-code linear students distilled
//! from the model's logits and returns the sentences holding the n-grams
//! with the largest positive contributions.
//!
//! Snippet ranges are UTF-8 byte offsets into the note text.

mod attn;
mod distill;
mod explainer;
mod features;
mod fidelity;
mod kd;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use attn::extract_snippets_attn;
pub use distill::{distill, KdConfig, StudentModel, StudentSet, STUDENTS_FILE};
pub use explainer::{Explainer, DEFAULT_TOP_N, DEFAULT_WINDOW};
pub use features::{note_ngrams, FeatureExtractor, FeatureHit, Ngram, FEATURES_FILE};
pub use fidelity::{
    collect_logits, fidelity, fidelity_from_logits, pearson, CodeFidelity, FidelityReport, MIN_TEACHER_POSITIVES,
};
pub use kd::extract_snippets_kd;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Attn,
    Kd,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Attn => "attn",
            Method::Kd => "kd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn" => Ok(Method::Attn),
            "kd" => Ok(Method::Kd),
            other => Err(Error::Config(format!("unknown method {other:?}, expected attn or kd"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub score: f64,
}

impl Snippet {
    pub(crate) fn new(note_text: &str, range: Range<usize>, score: f64) -> Self {
        Self { start: range.start, end: range.end, text: note_text[range].to_string(), score }
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn overlaps(&self, other: &Range<usize>) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// Range inside the text, on character boundaries, and reproducing
    /// `text` exactly.
    pub fn is_valid_for(&self, note_text: &str) -> bool {
        self.start <= self.end
            && note_text.get(self.start..self.end) == Some(self.text.as_str())
            && self.score.is_finite()
    }
}

/// Snippets for one (note, code) pair, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSet {
    pub note_id: String,
    pub code: String,
    pub method: Method,
    pub snippets: Vec<Snippet>,
}

impl ExplanationSet {
    pub fn top(&self) -> Option<&Snippet> {
        self.snippets.first()
    }
}

pub(crate) fn sort_snippets(snippets: &mut [Snippet]) {
    snippets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.cmp(&b.start)));
}
