use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::explain::{Explainer, Method, Snippet, DEFAULT_WINDOW};
use crate::rng::derived;
use crate::train::check_threshold;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SheetConfig {
    pub sheet_id: String,
    pub n_items: usize,
    /// Items are split evenly across these methods; earlier methods take
    /// the remainder.
    pub methods: Vec<Method>,
    pub seed: u64,
    pub threshold: f64,
    pub window: usize,
}

impl SheetConfig {
    pub fn new(sheet_id: impl Into<String>, n_items: usize) -> Self {
        Self {
            sheet_id: sheet_id.into(),
            n_items,
            methods: vec![Method::Attn, Method::Kd],
            seed: 7,
            threshold: 0.5,
            window: DEFAULT_WINDOW,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items < 1 {
            return Err(Error::Config("n_items must be at least 1".into()));
        }
        if self.sheet_id.trim().is_empty() {
            return Err(Error::Config("sheet_id must not be empty".into()));
        }
        let distinct: BTreeSet<_> = self.methods.iter().collect();
        if self.methods.is_empty() || distinct.len() != self.methods.len() {
            return Err(Error::Config("methods must be non-empty and distinct".into()));
        }
        check_threshold(self.threshold)
    }

    /// Items per method, in `methods` order.
    pub fn allocation(&self) -> Vec<usize> {
        let m = self.methods.len();
        (0..m).map(|i| self.n_items / m + usize::from(i < self.n_items % m)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SheetItem {
    pub item_id: String,
    pub note_id: String,
    pub code: String,
    pub title: String,
    pub method: Method,
    pub probability: f64,
    pub note_text: String,
    pub snippet: Snippet,
}

/// What annotators see: no method and no method-specific score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindedItem {
    pub item_id: String,
    pub note_id: String,
    pub code: String,
    pub title: String,
    pub note_text: String,
    pub start: usize,
    pub end: usize,
    pub snippet: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindedSheet {
    pub sheet_id: String,
    pub items: Vec<BlindedItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionSheet {
    pub sheet_id: String,
    pub config_digest: String,
    pub items: Vec<SheetItem>,
}

impl QuestionSheet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !seen.insert(item.item_id.as_str()) {
                return Err(Error::Validation(format!("duplicate item id {}", item.item_id)));
            }
            if !item.snippet.is_valid_for(&item.note_text) {
                return Err(Error::Validation(format!(
                    "item {} has a snippet that does not match its note",
                    item.item_id
                )));
            }
        }
        Ok(())
    }

    pub fn item(&self, item_id: &str) -> Option<&SheetItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn methods(&self) -> BTreeMap<String, Method> {
        self.items.iter().map(|i| (i.item_id.clone(), i.method)).collect()
    }

    pub fn blinded(&self) -> BlindedSheet {
        BlindedSheet {
            sheet_id: self.sheet_id.clone(),
            items: self
                .items
                .iter()
                .map(|i| BlindedItem {
                    item_id: i.item_id.clone(),
                    note_id: i.note_id.clone(),
                    code: i.code.clone(),
                    title: i.title.clone(),
                    note_text: i.note_text.clone(),
                    start: i.snippet.start,
                    end: i.snippet.end,
                    snippet: i.snippet.text.clone(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let sheet: QuestionSheet = serde_json::from_slice(&bytes)?;
        sheet.validate()?;
        Ok(sheet)
    }
}

struct Candidate {
    note: usize,
    code: usize,
    probability: f64,
    /// Top snippet per requested method, in `config.methods` order.
    snippets: Vec<Option<Snippet>>,
}

/// Samples confident (note, code) predictions and attaches each method's
/// best snippet.
///
/// Every pair with probability at least `threshold` is a candidate. The
/// candidates are shuffled once; each method then takes its quota from
/// that order, skipping pairs for which it produced no snippet, so methods
/// tend to be asked about the same pairs. The selected items are shuffled
/// again to interleave methods and numbered in that order.
pub fn build_question_sheet(dataset: &Dataset, explainer: &Explainer, config: &SheetConfig) -> Result<QuestionSheet> {
    config.validate()?;
    if let Some(m) = config.methods.iter().find(|m| !explainer.supports(**m)) {
        return Err(Error::Config(format!("method {m} needs distilled students")));
    }
    let explainer = Explainer { window: config.window, top_n: 1, ..*explainer };
    let model = explainer.model;
    let per_note: Vec<Vec<Candidate>> = dataset
        .notes()
        .par_iter()
        .enumerate()
        .map(|(n, note)| {
            let prediction = model.predict(&note.text)?;
            let mut out = Vec::new();
            for (l, &p) in prediction.probabilities.iter().enumerate() {
                if p < config.threshold {
                    continue;
                }
                let snippets = config
                    .methods
                    .iter()
                    .map(|m| {
                        let set = explainer.explain_prediction(&prediction, &note.id, &note.text, l, *m)?;
                        Ok(set.snippets.into_iter().next())
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push(Candidate { note: n, code: l, probability: p, snippets });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let candidates: Vec<Candidate> = per_note.into_iter().flatten().collect();

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(&mut derived(config.seed, 0));

    let mut items = Vec::with_capacity(config.n_items);
    for (mi, (method, quota)) in config.methods.iter().zip(config.allocation()).enumerate() {
        let usable: Vec<usize> = order.iter().copied().filter(|&c| candidates[c].snippets[mi].is_some()).collect();
        if usable.len() < quota {
            return Err(Error::Sheet(format!(
                "{} items requested, {quota} of them from {method}, but only {} confident predictions \
                 have {method} evidence ({} pairs reach p >= {})",
                config.n_items,
                usable.len(),
                candidates.len(),
                config.threshold
            )));
        }
        for &c in &usable[..quota] {
            let cand = &candidates[c];
            let note = &dataset.notes()[cand.note];
            let entry = model.codes.get(cand.code);
            items.push(SheetItem {
                item_id: String::new(),
                note_id: note.id.clone(),
                code: entry.code.clone(),
                title: entry.title.clone(),
                method: *method,
                probability: cand.probability,
                note_text: note.text.clone(),
                snippet: cand.snippets[mi].clone().unwrap(),
            });
        }
    }
    items.shuffle(&mut derived(config.seed, 1));
    let width = config.n_items.to_string().len().max(3);
    for (i, item) in items.iter_mut().enumerate() {
        item.item_id = format!("q{:0width$}", i + 1);
    }

    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(model.digest()?);
    if let Some((students, _)) = explainer.students {
        h.update(&students.extractor_digest);
    }
    let sheet = QuestionSheet { sheet_id: config.sheet_id.clone(), config_digest: hex::encode(h.finalize()), items };
    sheet.validate()?;
    Ok(sheet)
}
