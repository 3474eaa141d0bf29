use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{segment_sentences, tokenize, Dataset};
use crate::error::{Error, Result};

pub const FEATURES_FILE: &str = "features.json";

/// A unigram or within-sentence bigram occurrence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ngram {
    pub text: String,
    /// Byte span from the first token's start to the last token's end.
    pub span: Range<usize>,
    /// Index into the note's sentence list.
    pub sentence: usize,
}

/// Sentence byte ranges and every n-gram occurrence, in text order.
pub fn note_ngrams(text: &str) -> (Vec<Range<usize>>, Vec<Ngram>) {
    let sentences = segment_sentences(text);
    let tokens = tokenize(text);
    let mut out = Vec::with_capacity(tokens.len() * 2);
    let sentence_of = |pos: usize| sentences.partition_point(|s| s.end <= pos);
    for (i, tok) in tokens.iter().enumerate() {
        let sentence = sentence_of(tok.span.start);
        out.push(Ngram { text: tok.text.clone(), span: tok.span.clone(), sentence });
        if let Some(next) = tokens.get(i + 1) {
            if sentence_of(next.span.start) == sentence {
                out.push(Ngram {
                    text: format!("{} {}", tok.text, next.text),
                    span: tok.span.start..next.span.end,
                    sentence,
                });
            }
        }
    }
    (sentences, out)
}

/// One feature present in a note.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHit {
    pub index: usize,
    /// L2-normalized tf-idf value.
    pub value: f64,
    pub first: Range<usize>,
    pub sentence: Range<usize>,
}

/// Unigram and bigram tf-idf features over a fixed vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    features: Vec<String>,
    idf: Vec<f64>,
    max_features: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    max_features: usize,
    features: Vec<String>,
    idf: Vec<f64>,
}

impl FeatureExtractor {
    /// Keeps the `max_features` n-grams with the highest document
    /// frequency, ties in lexicographic order; `idf = ln((1+N)/(1+df)) + 1`.
    pub fn build(dataset: &Dataset, max_features: usize) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Config("cannot build features from an empty dataset".into()));
        }
        if max_features == 0 {
            return Err(Error::Config("max_features must be at least 1".into()));
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for note in dataset.notes() {
            let grams: BTreeSet<String> = note_ngrams(&note.text).1.into_iter().map(|g| g.text).collect();
            for g in grams {
                *df.entry(g).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = df.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_features);
        let n = dataset.len() as f64;
        let (features, idf) = ranked.into_iter().map(|(g, d)| (g, ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)).unzip();
        Self::from_parts(features, idf, max_features)
    }

    fn from_parts(features: Vec<String>, idf: Vec<f64>, max_features: usize) -> Result<Self> {
        if features.len() != idf.len() || features.len() > max_features {
            return Err(Error::Corrupt(format!(
                "{} features with {} idf weights (cap {max_features})",
                features.len(),
                idf.len()
            )));
        }
        if idf.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Corrupt("idf weights must be finite and non-negative".into()));
        }
        let index: HashMap<String, usize> = features.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect();
        if index.len() != features.len() {
            return Err(Error::Corrupt("duplicate feature names".into()));
        }
        Ok(Self { features, idf, max_features, index })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn max_features(&self) -> usize {
        self.max_features
    }

    pub fn feature_index(&self, gram: &str) -> Option<usize> {
        self.index.get(gram).copied()
    }

    /// Features present in `text` with their values and first occurrences,
    /// ordered by feature index.
    pub fn hits(&self, text: &str) -> Vec<FeatureHit> {
        let (sentences, grams) = note_ngrams(text);
        let mut found: BTreeMap<usize, (usize, Range<usize>, usize)> = BTreeMap::new();
        for g in grams {
            if let Some(i) = self.feature_index(&g.text) {
                found.entry(i).and_modify(|e| e.0 += 1).or_insert((1, g.span, g.sentence));
            }
        }
        let raw: Vec<f64> = found.iter().map(|(&i, (tf, _, _))| *tf as f64 * self.idf[i]).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        found
            .into_iter()
            .zip(raw)
            .map(|((index, (_, first, s)), v)| FeatureHit {
                index,
                value: if norm > 0.0 { v / norm } else { 0.0 },
                first,
                sentence: sentences[s].clone(),
            })
            .collect()
    }

    /// Sparse L2-normalized tf-idf vector as `(feature, value)` pairs.
    pub fn transform(&self, text: &str) -> Vec<(usize, f64)> {
        self.hits(text).into_iter().map(|h| (h.index, h.value)).collect()
    }

    fn stored(&self) -> Stored {
        Stored { max_features: self.max_features, features: self.features.clone(), idf: self.idf.clone() }
    }

    /// Hex SHA-256 of the serialized extractor.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.stored()).expect("plain data serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(&self.stored())?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let s: Stored = serde_json::from_slice(&bytes)?;
        Self::from_parts(s.features, s.idf, s.max_features)
    }
}
