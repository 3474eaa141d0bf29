use super::{extract_snippets_attn, extract_snippets_kd, ExplanationSet, FeatureExtractor, Method, StudentSet};
use crate::error::{Error, Result};
use crate::model::{CodePrediction, RacModel};

pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_TOP_N: usize = 3;

/// Bundles a model with optional distilled students so callers can ask for
/// either kind of evidence by name.
#[derive(Clone, Copy)]
pub struct Explainer<'a> {
    pub model: &'a RacModel,
    pub students: Option<(&'a StudentSet, &'a FeatureExtractor)>,
    pub window: usize,
    pub top_n: usize,
}

impl<'a> Explainer<'a> {
    pub fn new(model: &'a RacModel) -> Self {
        Self { model, students: None, window: DEFAULT_WINDOW, top_n: DEFAULT_TOP_N }
    }

    pub fn with_students(mut self, students: &'a StudentSet, extractor: &'a FeatureExtractor) -> Self {
        self.students = Some((students, extractor));
        self
    }

    pub fn supports(&self, method: Method) -> bool {
        method == Method::Attn || self.students.is_some()
    }

    pub fn explain(&self, note_id: &str, text: &str, code: &str, method: Method) -> Result<ExplanationSet> {
        let index = self.code_index(code)?;
        match method {
            Method::Attn => {
                let prediction = self.model.predict(text)?;
                self.explain_prediction(&prediction, note_id, text, index, method)
            }
            Method::Kd => self.kd(note_id, text, code),
        }
    }

    /// Like [`Explainer::explain`] with the model output already computed.
    pub fn explain_prediction(
        &self,
        prediction: &CodePrediction,
        note_id: &str,
        text: &str,
        code: usize,
        method: Method,
    ) -> Result<ExplanationSet> {
        if code >= self.model.label_count() {
            return Err(Error::Validation(format!("code index {code} out of range")));
        }
        let name = &self.model.codes.get(code).code;
        match method {
            Method::Attn => extract_snippets_attn(prediction, note_id, text, code, name, self.window, self.top_n),
            Method::Kd => self.kd(note_id, text, name),
        }
    }

    fn kd(&self, note_id: &str, text: &str, code: &str) -> Result<ExplanationSet> {
        let (students, extractor) =
            self.students.ok_or_else(|| Error::Config("kd explanations need distilled students".into()))?;
        extract_snippets_kd(students, extractor, note_id, text, code, self.top_n)
    }

    fn code_index(&self, code: &str) -> Result<usize> {
        self.model.codes.position(code).ok_or_else(|| Error::Validation(format!("unknown code {code}")))
    }
}
