//! Synthetic notes with planted trigger phrases.
//!
//! Each code owns a small pool of invented words that never occur in
//! background text. A note's gold codes are drawn from a Zipf popularity
//! curve, and every gold code contributes one sentence containing one of its
//! three trigger phrases. The byte span of each planted phrase is returned
//! as ground truth for explanation tests.
//!
//! The code world (words, titles, triggers) comes from stream 0 of the seed;
//! note `i` uses stream `i + 1`, so a larger corpus with the same seed
//! extends a smaller one note-for-note.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Note, TriggerSpan};
use super::text::tokenize;
use super::vocab::{CodeEntry, CodeKind, CodeVocabulary};
use crate::error::{Error, Result};
use crate::rng::{derived, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.min > self.max {
            return Err(Error::Config(format!("{what}: min {} exceeds max {}", self.min, self.max)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_codes: usize,
    pub n_notes: usize,
    /// Explicit trigger phrases per code id. Empty means generate them; when
    /// given, codes are taken from the keys in order and `n_codes` must match.
    #[serde(default)]
    pub triggers: BTreeMap<String, [String; 3]>,
    /// Explicit background words; empty means generate
    /// `background_vocab_size` invented words.
    #[serde(default)]
    pub background_words: Vec<String>,
    pub background_vocab_size: usize,
    pub codes_per_note: CountRange,
    /// Background sentences per note, besides the trigger sentences.
    pub background_sentences: CountRange,
    pub words_per_sentence: CountRange,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_codes: 8,
            n_notes: 32,
            triggers: BTreeMap::new(),
            background_words: Vec::new(),
            background_vocab_size: 200,
            codes_per_note: CountRange::new(1, 3),
            background_sentences: CountRange::new(2, 5),
            words_per_sentence: CountRange::new(4, 9),
            zipf_exponent: 1.2,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub codes: CodeVocabulary,
    pub triggers: Vec<TriggerSpan>,
    /// Trigger phrases per code, in label order.
    pub phrases: Vec<[String; 3]>,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_codes == 0 || self.n_notes == 0 {
            return Err(Error::Config("n_codes and n_notes must be positive".into()));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::Config(format!("zipf exponent must be positive, got {}", self.zipf_exponent)));
        }
        if !self.triggers.is_empty() && self.triggers.len() != self.n_codes {
            return Err(Error::Config(format!(
                "{} trigger sets given for {} codes",
                self.triggers.len(),
                self.n_codes
            )));
        }
        self.codes_per_note.check("codes_per_note")?;
        self.background_sentences.check("background_sentences")?;
        self.words_per_sentence.check("words_per_sentence")?;
        if self.words_per_sentence.min == 0 {
            return Err(Error::Config("sentences need at least one word".into()));
        }
        if self.codes_per_note.min == 0 && self.background_sentences.max == 0 {
            return Err(Error::Config("notes could be generated empty".into()));
        }
        if self.background_words.is_empty() && self.background_vocab_size == 0 {
            return Err(Error::Config("background vocabulary is empty".into()));
        }
        Ok(())
    }
}

/// Normalised Zipf probabilities `p_k ∝ (k+1)^-s` for `k in 0..n`.
pub fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st", "pl"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

fn invent_word(rng: &mut Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| {
            let onset = ONSETS[rng.random_range(0..ONSETS.len())];
            let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
            format!("{onset}{vowel}")
        })
        .collect()
}

fn invent_unique(rng: &mut Rng, syllables: usize, taken: &mut BTreeSet<String>) -> String {
    loop {
        let w = invent_word(rng, syllables);
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

struct World {
    codes: CodeVocabulary,
    phrases: Vec<[String; 3]>,
    background: Vec<String>,
}

fn build_world(spec: &SyntheticSpec) -> Result<World> {
    let mut rng = derived(spec.seed, 0);
    let mut taken = BTreeSet::new();

    let background: Vec<String> = if spec.background_words.is_empty() {
        (0..spec.background_vocab_size).map(|_| invent_unique(&mut rng, 2, &mut taken)).collect()
    } else {
        taken.extend(spec.background_words.iter().cloned());
        spec.background_words.clone()
    };
    let background_set: BTreeSet<&str> = background.iter().map(String::as_str).collect();

    let mut entries = Vec::with_capacity(spec.n_codes);
    let mut phrases = Vec::with_capacity(spec.n_codes);
    if spec.triggers.is_empty() {
        for i in 0..spec.n_codes {
            // Three-syllable words cannot collide with two-syllable background.
            let pool: Vec<String> = (0..4).map(|_| invent_unique(&mut rng, 3, &mut taken)).collect();
            let kind = if i % 4 == 3 { CodeKind::Procedure } else { CodeKind::Diagnosis };
            let (prefix, noun) = match kind {
                CodeKind::Diagnosis => ("D", "disorder"),
                CodeKind::Procedure => ("P", "procedure"),
            };
            entries.push(CodeEntry {
                code: format!("{prefix}{:03}", i + 1),
                title: format!("{} {} {noun}", pool[0], pool[2]),
                kind,
            });
            phrases.push([
                format!("{} {}", pool[0], pool[1]),
                format!("{} {}", pool[2], pool[3]),
                format!("{} {}", pool[1], pool[2]),
            ]);
        }
    } else {
        for (code, set) in &spec.triggers {
            entries.push(CodeEntry { code: code.clone(), title: set[0].clone(), kind: CodeKind::Diagnosis });
            phrases.push(set.clone());
        }
    }

    let mut seen_phrases = BTreeMap::new();
    for (entry, set) in entries.iter().zip(&phrases) {
        let distinct: BTreeSet<&String> = set.iter().collect();
        if distinct.len() != 3 {
            return Err(Error::Generation(format!("code {} needs three distinct trigger phrases", entry.code)));
        }
        for phrase in set {
            let words = tokenize(phrase);
            if words.is_empty() {
                return Err(Error::Generation(format!("code {} has an empty trigger phrase", entry.code)));
            }
            if let Some(w) = words.iter().find(|w| background_set.contains(w.text.as_str())) {
                return Err(Error::Generation(format!(
                    "trigger word {:?} of code {} collides with the background vocabulary",
                    w.text, entry.code
                )));
            }
            if let Some(other) = seen_phrases.insert(phrase.to_lowercase(), entry.code.clone()) {
                return Err(Error::Generation(format!(
                    "trigger phrase {phrase:?} shared by codes {other} and {}",
                    entry.code
                )));
            }
        }
    }

    Ok(World { codes: CodeVocabulary::new(entries)?, phrases, background })
}

/// Samples `k` distinct indices with probability proportional to `weights`,
/// sequentially without replacement.
fn sample_without_replacement(weights: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut remaining: Vec<(usize, f64)> = weights.iter().copied().enumerate().collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(weights.len()) {
        let total: f64 = remaining.iter().map(|(_, w)| w).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (j, (_, w)) in remaining.iter().enumerate() {
            if u < *w {
                pick = j;
                break;
            }
            u -= w;
        }
        out.push(remaining.remove(pick).0);
    }
    out
}

fn background_sentence(world: &World, spec: &SyntheticSpec, rng: &mut Rng) -> Vec<String> {
    let n = spec.words_per_sentence.sample(rng);
    (0..n).map(|_| world.background[rng.random_range(0..world.background.len())].clone()).collect()
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let world = build_world(spec)?;
    let weights = zipf_weights(spec.n_codes, spec.zipf_exponent);

    let mut notes = Vec::with_capacity(spec.n_notes);
    let mut triggers = Vec::new();
    for i in 0..spec.n_notes {
        let mut rng = derived(spec.seed, i as u64 + 1);
        let note_id = format!("note-{:05}", i + 1);
        let k = spec.codes_per_note.sample(&mut rng);
        let mut gold = sample_without_replacement(&weights, k, &mut rng);
        gold.sort_unstable();

        // (words, planted code index, index of first trigger word, phrase)
        let mut sentences: Vec<(Vec<String>, Option<(usize, usize, String)>)> = Vec::new();
        for &code in &gold {
            let phrase = world.phrases[code][rng.random_range(0..3)].clone();
            let mut words = background_sentence(&world, spec, &mut rng);
            let at = rng.random_range(0..=words.len());
            let phrase_words: Vec<String> = phrase.split_whitespace().map(str::to_string).collect();
            words.splice(at..at, phrase_words);
            sentences.push((words, Some((code, at, phrase))));
        }
        for _ in 0..spec.background_sentences.sample(&mut rng) {
            sentences.push((background_sentence(&world, spec, &mut rng), None));
        }
        sentences.shuffle(&mut rng);

        let mut text = String::new();
        for (words, planted) in sentences {
            if !text.is_empty() {
                text.push(' ');
            }
            let sentence_start = text.len();
            let body = words.join(" ");
            if let Some((code, at, phrase)) = planted {
                let offset: usize = words[..at].iter().map(|w| w.len() + 1).sum();
                let start = sentence_start + offset;
                triggers.push(TriggerSpan {
                    note_id: note_id.clone(),
                    code: world.codes.get(code).code.clone(),
                    start,
                    end: start + phrase.len(),
                });
            }
            text.push_str(&body);
            text.push('.');
        }
        let codes = gold.iter().map(|&c| world.codes.get(c).code.clone());
        notes.push(Note::new(note_id, text, codes)?);
    }

    Ok(SyntheticCorpus { dataset: Dataset::new(notes), codes: world.codes, triggers, phrases: world.phrases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn forced_single_code_note_has_its_trigger() {
        let spec =
            SyntheticSpec { n_codes: 1, n_notes: 1, codes_per_note: CountRange::new(1, 1), ..SyntheticSpec::default() };
        let c = generate_synthetic_corpus(&spec).unwrap();
        let note = &c.dataset.notes()[0];
        assert_eq!(note.gold_codes.len(), 1);
        let hits = c.phrases[0].iter().filter(|p| note.text.contains(p.as_str())).count();
        assert_eq!(hits, 1);
        assert_eq!(c.triggers.len(), 1);
        let t = &c.triggers[0];
        assert!(c.phrases[0].contains(&note.text[t.start..t.end].to_string()));
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::default();
        let mut files = Vec::new();
        for run in 0..2 {
            let c = generate_synthetic_corpus(&spec).unwrap();
            let p = dir.path().join(format!("n{run}.jsonl"));
            c.dataset.save(&p).unwrap();
            files.push(std::fs::read(p).unwrap());
        }
        assert_eq!(files[0], files[1]);
    }

    #[test]
    fn larger_corpus_extends_smaller() {
        let small = generate_synthetic_corpus(&SyntheticSpec::default()).unwrap();
        let big = generate_synthetic_corpus(&SyntheticSpec { n_notes: 40, ..SyntheticSpec::default() }).unwrap();
        assert_eq!(small.codes, big.codes);
        assert_eq!(small.dataset.notes(), &big.dataset.notes()[..32]);
    }

    #[test]
    fn planted_triggers_respect_gold_sets() {
        let c = generate_synthetic_corpus(&SyntheticSpec { n_notes: 100, ..SyntheticSpec::default() }).unwrap();
        for note in c.dataset.notes() {
            for (l, entry) in c.codes.entries().iter().enumerate() {
                let gold = note.gold_codes.contains(&entry.code);
                let spans: Vec<_> =
                    c.triggers.iter().filter(|t| t.note_id == note.id && t.code == entry.code).collect();
                if gold {
                    assert!(!spans.is_empty());
                    for s in spans {
                        assert!(c.phrases[l].contains(&note.text[s.start..s.end].to_string()));
                    }
                } else {
                    for p in &c.phrases[l] {
                        assert!(!note.text.contains(p.as_str()), "{} in {}", p, note.id);
                    }
                }
            }
        }
    }

    #[test]
    fn zipf_frequencies_pass_chi_square() {
        let spec = SyntheticSpec {
            n_codes: 64,
            n_notes: 1000,
            codes_per_note: CountRange::new(1, 1),
            zipf_exponent: 1.2,
            seed: 2024,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic_corpus(&spec).unwrap();
        let mut counts = vec![0usize; 64];
        for note in c.dataset.notes() {
            for code in &note.gold_codes {
                counts[c.codes.position(code).unwrap()] += 1;
            }
        }
        let expected = zipf_weights(64, 1.2);
        let n = 1000.0;
        let stat: f64 = counts.iter().zip(&expected).map(|(&o, &p)| (o as f64 - n * p).powi(2) / (n * p)).sum();
        let p_value = 1.0 - ChiSquared::new(63.0).unwrap().cdf(stat);
        assert!(p_value > 0.01, "chi2={stat}, p={p_value}");
    }

    #[test]
    fn long_tail_top_decile_dominates() {
        let spec =
            SyntheticSpec { n_codes: 64, n_notes: 1000, zipf_exponent: 1.0, seed: 99, ..SyntheticSpec::default() };
        let c = generate_synthetic_corpus(&spec).unwrap();
        let mut counts = vec![0usize; 64];
        for note in c.dataset.notes() {
            for code in &note.gold_codes {
                counts[c.codes.position(code).unwrap()] += 1;
            }
        }
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let total: usize = counts.iter().sum();
        let top: usize = counts[..7].iter().sum();
        assert!(top as f64 / total as f64 > 0.5, "{top}/{total}");
    }

    #[test]
    fn explicit_trigger_colliding_with_background_fails() {
        let mut triggers = BTreeMap::new();
        triggers.insert("401.9".to_string(), ["high blood".to_string(), "bp raised".into(), "htn noted".into()]);
        let spec = SyntheticSpec {
            n_codes: 1,
            n_notes: 1,
            triggers,
            background_words: vec!["patient".into(), "blood".into()],
            ..SyntheticSpec::default()
        };
        match generate_synthetic_corpus(&spec) {
            Err(Error::Generation(msg)) => assert!(msg.contains("blood"), "{msg}"),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_positive_exponent() {
        let spec = SyntheticSpec { zipf_exponent: 0.0, ..SyntheticSpec::default() };
        assert!(matches!(generate_synthetic_corpus(&spec), Err(Error::Config(_))));
    }
}
