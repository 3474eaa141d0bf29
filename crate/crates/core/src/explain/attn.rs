use std::ops::Range;

use super::{sort_snippets, ExplanationSet, Method, Snippet};
use crate::error::{Error, Result};
use crate::model::CodePrediction;

/// Sentence-level snippets around the attention peaks of one code.
///
/// Tokens are visited in descending attention order (earlier token on
/// ties). Each visited token proposes its sentence, clipped to `window`
/// tokens either side of it; a proposal overlapping an accepted one is
/// dropped, so the higher-ranked peak keeps the span. A snippet's score is
/// the attention mass of its tokens. The `top_n` best-scoring snippets are
/// returned, highest first, earlier start on ties.
///
/// `text` must be the text `prediction` was computed from.
pub fn extract_snippets_attn(
    prediction: &CodePrediction,
    note_id: &str,
    text: &str,
    code: usize,
    code_name: &str,
    window: usize,
    top_n: usize,
) -> Result<ExplanationSet> {
    if top_n < 1 {
        return Err(Error::Config("top_n must be at least 1".into()));
    }
    if code >= prediction.attention.rows() {
        return Err(Error::Contract(format!("code index {code} outside {} scored codes", prediction.attention.rows())));
    }
    let enc = &prediction.encoded;
    if enc.spans.last().is_some_and(|s| s.end > text.len()) {
        return Err(Error::Contract("prediction token spans exceed the note text".into()));
    }
    let weights = prediction.attention_row(code);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));

    let mut taken: Vec<Range<usize>> = Vec::new();
    let mut snippets = Vec::new();
    for peak in order {
        let sentence = enc.sentence_of(peak);
        let seg = &enc.segments[sentence];
        let first = seg.start.max(peak.saturating_sub(window));
        let last = (seg.end - 1).min(peak + window);
        let tokens = first..last + 1;
        if taken.iter().any(|r| r.start < tokens.end && tokens.start < r.end) {
            continue;
        }
        let score: f64 = weights[tokens.clone()].iter().sum();
        let bytes = if tokens == *seg {
            enc.sentence_spans[sentence].clone()
        } else {
            enc.spans[first].start..enc.spans[last].end
        };
        snippets.push(Snippet::new(text, bytes, score));
        taken.push(tokens);
    }
    sort_snippets(&mut snippets);
    snippets.truncate(top_n);
    Ok(ExplanationSet { note_id: note_id.to_string(), code: code_name.to_string(), method: Method::Attn, snippets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{segment_sentences, tokenize};
    use crate::model::EncodedNote;
    use crate::tensor::Tensor;

    fn prediction(text: &str, attention: Vec<f64>) -> CodePrediction {
        let tokens = tokenize(text);
        let mut segments = Vec::new();
        let mut sentence_spans = Vec::new();
        for s in segment_sentences(text) {
            let a = tokens.iter().position(|t| t.span.start >= s.start).unwrap();
            let b = tokens.iter().rposition(|t| t.span.end <= s.end).unwrap() + 1;
            segments.push(a..b);
            sentence_spans.push(s);
        }
        let t = tokens.len();
        CodePrediction {
            probabilities: vec![0.5],
            logits: vec![0.0],
            attention: Tensor::new(vec![1, t], attention).unwrap(),
            encoded: EncodedNote {
                ids: vec![1; t],
                spans: tokens.into_iter().map(|t| t.span).collect(),
                segments,
                sentence_spans,
            },
        }
    }

    #[test]
    fn single_token_note_is_whole_snippet() {
        let p = prediction("fever", vec![1.0]);
        let set = extract_snippets_attn(&p, "n", "fever", 0, "C", 3, 2).unwrap();
        assert_eq!(set.snippets.len(), 1);
        assert_eq!(set.snippets[0].text, "fever");
        assert_eq!(set.snippets[0].score, 1.0);
    }

    #[test]
    fn uniform_attention_picks_first_sentence() {
        let text = "a b. c d. e f";
        let p = prediction(text, vec![1.0 / 6.0; 6]);
        let set = extract_snippets_attn(&p, "n", text, 0, "C", 5, 1).unwrap();
        assert_eq!(set.snippets[0].text, "a b");
        assert!((set.snippets[0].score - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn window_clips_sentence() {
        let text = "a b c d e f g";
        let p = prediction(text, vec![0.0, 0.0, 0.1, 0.6, 0.1, 0.1, 0.1]);
        let set = extract_snippets_attn(&p, "n", text, 0, "C", 1, 1).unwrap();
        assert_eq!(set.snippets[0].text, "c d e");
        assert!((set.snippets[0].score - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sentences_ranked_by_mass() {
        let text = "a b. c d. e f";
        let p = prediction(text, vec![0.3, 0.0, 0.1, 0.1, 0.25, 0.25]);
        let set = extract_snippets_attn(&p, "n", text, 0, "C", 4, 3).unwrap();
        let texts: Vec<&str> = set.snippets.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["e f", "a b", "c d"]);
    }

    #[test]
    fn zero_top_n_is_config_error() {
        let p = prediction("fever", vec![1.0]);
        assert!(matches!(extract_snippets_attn(&p, "n", "fever", 0, "C", 3, 0), Err(Error::Config(_))));
    }
}
