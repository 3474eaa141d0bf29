use std::ops::Range;

/// A lowercased word with its byte span in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub span: Range<usize>,
}

/// Splits `text` into maximal runs of alphanumeric characters.
///
/// Spans are UTF-8 byte offsets into `text`; `&text[span]` is the token
/// before lowercasing.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                tokens.push(make_token(text, s..i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push(make_token(text, s..text.len()));
    }
    tokens
}

fn make_token(text: &str, span: Range<usize>) -> Token {
    Token { text: text[span.clone()].to_lowercase(), span }
}

pub fn is_sentence_separator(ch: char) -> bool {
    matches!(ch, '.' | '!' | '?' | '\n')
}

/// Byte ranges of sentences: text between separators (`. ! ?` and
/// newline), trimmed of surrounding whitespace, empty pieces dropped.
pub fn segment_sentences(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut piece_start = 0;
    for (i, ch) in text.char_indices() {
        if is_sentence_separator(ch) {
            push_trimmed(text, piece_start..i, &mut out);
            piece_start = i + ch.len_utf8();
        }
    }
    push_trimmed(text, piece_start..text.len(), &mut out);
    out
}

fn push_trimmed(text: &str, range: Range<usize>, out: &mut Vec<Range<usize>>) {
    let piece = &text[range.clone()];
    let lead = piece.len() - piece.trim_start().len();
    let trimmed = piece.trim();
    if !trimmed.is_empty() {
        let start = range.start + lead;
        out.push(start..start + trimmed.len());
    }
}
