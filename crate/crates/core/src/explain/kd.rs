use super::distill::StudentSet;
use super::features::FeatureExtractor;
use super::{sort_snippets, ExplanationSet, Method, Snippet};
use crate::error::{Error, Result};

/// Sentences holding the `top_n` features with the largest positive
/// contribution `w[f] * x[f]` to the code's student.
///
/// Each feature points at the sentence of its first occurrence. Features
/// landing in the same sentence are merged and their contributions summed.
/// Ties between features go to the earlier first occurrence. A note with
/// no positive contribution yields an empty set.
pub fn extract_snippets_kd(
    students: &StudentSet,
    extractor: &FeatureExtractor,
    note_id: &str,
    text: &str,
    code: &str,
    top_n: usize,
) -> Result<ExplanationSet> {
    if top_n < 1 {
        return Err(Error::Config("top_n must be at least 1".into()));
    }
    students.check_extractor(extractor)?;
    let student = students.get(code).ok_or_else(|| Error::Validation(format!("no student for code {code}")))?;
    let mut ranked: Vec<(f64, _)> = extractor
        .hits(text)
        .into_iter()
        .map(|h| (student.weights[h.index] * h.value, h))
        .filter(|(c, _)| *c > 0.0)
        .collect();
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0).then(a.1.first.start.cmp(&b.1.first.start)).then(a.1.index.cmp(&b.1.index))
    });
    ranked.truncate(top_n);

    let mut snippets: Vec<Snippet> = Vec::new();
    for (contribution, hit) in ranked {
        match snippets.iter_mut().find(|s| s.start == hit.sentence.start) {
            Some(s) => s.score += contribution,
            None => snippets.push(Snippet::new(text, hit.sentence, contribution)),
        }
    }
    sort_snippets(&mut snippets);
    Ok(ExplanationSet { note_id: note_id.to_string(), code: code.to_string(), method: Method::Kd, snippets })
}
