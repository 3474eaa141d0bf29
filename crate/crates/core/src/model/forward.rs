use std::ops::Range;

use super::config::ModelConfig;
use super::params::{EncoderLayer, Params, RacParameters};
use crate::corpus::{segment_sentences, tokenize, CodeVocabulary, TokenVocabulary};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A note mapped to token ids, grouped into sentences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedNote {
    pub ids: Vec<usize>,
    /// Byte span of each token in the note text.
    pub spans: Vec<Range<usize>>,
    /// Token-index ranges, one per non-empty sentence, tiling `0..T`.
    pub segments: Vec<Range<usize>>,
    /// Byte span of each segment's sentence.
    pub sentence_spans: Vec<Range<usize>>,
}

impl EncodedNote {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index into `segments` of the sentence holding token `t`.
    pub fn sentence_of(&self, t: usize) -> usize {
        self.segments.partition_point(|s| s.end <= t)
    }
}

/// Tokenizes and segments `text`, keeping whole sentences while they fit in
/// `max_tokens`. A first sentence longer than the budget is cut.
pub fn encode_note(text: &str, vocab: &TokenVocabulary, max_tokens: usize) -> Result<EncodedNote> {
    if text.trim().is_empty() {
        return Err(Error::Input("note text is empty".into()));
    }
    let tokens = tokenize(text);
    let mut enc = EncodedNote { ids: Vec::new(), spans: Vec::new(), segments: Vec::new(), sentence_spans: Vec::new() };
    let mut cursor = 0;
    for sentence in segment_sentences(text) {
        let first = tokens[cursor..].partition_point(|t| t.span.start < sentence.start) + cursor;
        let last = tokens[first..].partition_point(|t| t.span.end <= sentence.end) + first;
        cursor = last;
        if first == last {
            continue;
        }
        let room = max_tokens - enc.ids.len();
        let take = if last - first <= room {
            last - first
        } else if enc.ids.is_empty() {
            room
        } else {
            0
        };
        if take == 0 {
            break;
        }
        let start = enc.ids.len();
        for t in &tokens[first..first + take] {
            enc.ids.push(vocab.id(&t.text));
            enc.spans.push(t.span.clone());
        }
        enc.segments.push(start..enc.ids.len());
        enc.sentence_spans.push(sentence);
        if take < last - first {
            break;
        }
    }
    if enc.ids.is_empty() {
        return Err(Error::Input("note has no tokens".into()));
    }
    Ok(enc)
}

/// Sinusoidal encodings whose position counter restarts at every segment.
pub fn sentence_positions(segments: &[Range<usize>], dim: usize) -> Tensor {
    let total = segments.last().map_or(0, |s| s.end);
    let mut data = vec![0.0; total * dim];
    for seg in segments {
        for (pos, t) in seg.clone().enumerate() {
            for i in 0..dim {
                let pair = (i / 2) as f64;
                let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
                data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    Tensor::from_parts(vec![total, dim], data)
}

/// Title token ids for every code plus the `L x N` averaging matrix that
/// turns their stacked embeddings into per-code means.
#[derive(Clone, Debug, PartialEq)]
pub struct TitleTokens {
    pub ids: Vec<usize>,
    pub averaging: Tensor,
}

impl TitleTokens {
    pub fn new(codes: &CodeVocabulary, vocab: &TokenVocabulary) -> Result<Self> {
        let per_code: Vec<Vec<usize>> =
            codes.entries().iter().map(|e| tokenize(&e.title).iter().map(|t| vocab.id(&t.text)).collect()).collect();
        if let Some(i) = per_code.iter().position(Vec::is_empty) {
            return Err(Error::Validation(format!("code {} has an empty title", codes.get(i).code)));
        }
        let n: usize = per_code.iter().map(Vec::len).sum();
        let mut averaging = vec![0.0; codes.len() * n];
        let mut ids = Vec::with_capacity(n);
        for (l, title) in per_code.iter().enumerate() {
            for &id in title {
                averaging[l * n + ids.len()] = 1.0 / title.len() as f64;
                ids.push(id);
            }
        }
        Ok(Self { ids, averaging: Tensor::from_parts(vec![codes.len(), n], averaging) })
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub probabilities: Var,
    pub attention: Var,
}

/// Records the parameters on `tape` as differentiable leaves.
pub fn register_params(tape: &mut Tape, params: &RacParameters) -> Params<Var> {
    params.map(|t| tape.leaf(t.clone()))
}

/// Records the parameters as constants (inference only).
pub fn constant_params(tape: &mut Tape, params: &RacParameters) -> Params<Var> {
    params.map(|t| tape.constant(t.clone()))
}

pub(crate) struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub config: &'a ModelConfig,
    pub mode: Mode,
    pub rng: Option<&'a mut Rng>,
}

impl Forward<'_> {
    fn dropout(&mut self, x: Var) -> Var {
        match (self.mode, self.rng.as_deref_mut()) {
            (Mode::Train, Some(rng)) => self.tape.dropout(x, self.config.dropout_rate, rng),
            _ => x,
        }
    }

    pub fn embed_and_convolve(&mut self, p: &Params<Var>, note: &EncodedNote) -> Result<Var> {
        if note.len() > self.config.max_tokens {
            return Err(Error::Input(format!("{} tokens exceed max_tokens {}", note.len(), self.config.max_tokens)));
        }
        let emb = self.tape.embedding(p.token_embedding, &note.ids)?;
        let pos = self.tape.constant(sentence_positions(&note.segments, self.config.embed_dim));
        let x = self.tape.add(emb, pos)?;
        let conv = self.tape.conv1d(x, p.conv_kernel, Some(p.conv_bias), &note.segments)?;
        let h = self.tape.gelu(conv);
        Ok(self.dropout(h))
    }

    fn attention_block(&mut self, layer: &EncoderLayer<Var>, x: Var) -> Result<Var> {
        let t = &mut *self.tape;
        let proj = |t: &mut Tape, w: Var, b: Var| -> Result<Var> {
            let m = t.matmul(x, w)?;
            t.add_row(m, b)
        };
        let q = proj(t, layer.query, layer.query_bias)?;
        let k = proj(t, layer.key, layer.key_bias)?;
        let v = proj(t, layer.value, layer.value_bias)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.attention_heads);
        for h in 0..self.config.attention_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = t.slice_cols(q, cols.clone())?;
            let kh = t.slice_cols(k, cols.clone())?;
            let vh = t.slice_cols(v, cols)?;
            let kt = t.transpose(kh)?;
            let scores = t.matmul(qh, kt)?;
            let scores = t.scale(scores, scale);
            let weights = t.softmax(scores)?;
            heads.push(t.matmul(weights, vh)?);
        }
        let joined = t.concat_cols(&heads)?;
        let out = t.matmul(joined, layer.output)?;
        t.add_row(out, layer.output_bias)
    }

    fn encoder_layer(&mut self, layer: &EncoderLayer<Var>, x: Var) -> Result<Var> {
        let attn = self.attention_block(layer, x)?;
        let attn = self.dropout(attn);
        let res = self.tape.add(x, attn)?;
        let h1 = self.tape.layer_norm(res, layer.norm1_gain, layer.norm1_bias)?;

        let f = self.tape.matmul(h1, layer.ffn_in)?;
        let f = self.tape.add_row(f, layer.ffn_in_bias)?;
        let f = self.tape.gelu(f);
        let f = self.tape.matmul(f, layer.ffn_out)?;
        let f = self.tape.add_row(f, layer.ffn_out_bias)?;
        let f = self.dropout(f);
        let res = self.tape.add(h1, f)?;
        self.tape.layer_norm(res, layer.norm2_gain, layer.norm2_bias)
    }

    pub fn encoder(&mut self, p: &Params<Var>, mut x: Var) -> Result<Var> {
        for layer in &p.layers {
            x = self.encoder_layer(layer, x)?;
        }
        Ok(x)
    }

    pub fn title_queries(&mut self, p: &Params<Var>, titles: &TitleTokens) -> Result<Var> {
        let emb = self.tape.embedding(p.token_embedding, &titles.ids)?;
        let avg = self.tape.constant(titles.averaging.clone());
        let mean = self.tape.matmul(avg, emb)?;
        self.tape.matmul(mean, p.title_projection)
    }

    /// Returns `(attention L x T, contexts L x D)`.
    pub fn label_attention(&mut self, p: &Params<Var>, encoded: Var, queries: Var) -> Result<(Var, Var)> {
        let t = &mut *self.tape;
        let keys = t.matmul(encoded, p.label_key)?;
        let values = t.matmul(encoded, p.label_value)?;
        let kt = t.transpose(keys)?;
        let logits = t.matmul(queries, kt)?;
        let logits = t.scale(logits, 1.0 / (self.config.embed_dim as f64).sqrt());
        let attention = t.softmax(logits)?;
        let contexts = t.matmul(attention, values)?;
        Ok((attention, contexts))
    }

    /// Per-code logits `u_l · context_l + b_l`.
    pub fn score(&mut self, p: &Params<Var>, contexts: Var) -> Result<Var> {
        let prod = self.tape.mul(p.output_weight, contexts)?;
        let dots = self.tape.sum_axis(prod, 1)?;
        self.tape.add(dots, p.output_bias)
    }

    pub fn run(&mut self, p: &Params<Var>, titles: &TitleTokens, note: &EncodedNote) -> Result<ForwardVars> {
        let features = self.embed_and_convolve(p, note)?;
        let encoded = self.encoder(p, features)?;
        let queries = self.title_queries(p, titles)?;
        let (attention, contexts) = self.label_attention(p, encoded, queries)?;
        let logits = self.score(p, contexts)?;
        let probabilities = self.tape.sigmoid(logits);
        Ok(ForwardVars { logits, probabilities, attention })
    }
}

fn eval_forward(config: &ModelConfig) -> (Tape, ModelConfig) {
    (Tape::new(), config.clone())
}

/// Embedding lookup, per-sentence positions, segmented convolution, GELU.
pub fn embed_and_convolve(note: &EncodedNote, params: &RacParameters, config: &ModelConfig) -> Result<Tensor> {
    let (mut tape, config) = eval_forward(config);
    let p = constant_params(&mut tape, params);
    let mut f = Forward { tape: &mut tape, config: &config, mode: Mode::Eval, rng: None };
    let out = f.embed_and_convolve(&p, note)?;
    Ok(tape.value(out).clone())
}

/// The transformer encoder stack in eval mode.
pub fn encoder_forward(features: &Tensor, params: &RacParameters, config: &ModelConfig) -> Result<Tensor> {
    if !features.is_finite() {
        return Err(Error::Input("encoder input is not finite".into()));
    }
    let (mut tape, config) = eval_forward(config);
    let p = constant_params(&mut tape, params);
    let x = tape.constant(features.clone());
    let mut f = Forward { tape: &mut tape, config: &config, mode: Mode::Eval, rng: None };
    let out = f.encoder(&p, x)?;
    Ok(tape.value(out).clone())
}

/// `q_l = mean(title token embeddings) · title_projection`, stacked `L x D`.
pub fn code_title_queries(titles: &TitleTokens, params: &RacParameters) -> Result<Tensor> {
    let mut tape = Tape::new();
    let emb = tape.constant(params.token_embedding.clone());
    let proj = tape.constant(params.title_projection.clone());
    let e = tape.embedding(emb, &titles.ids)?;
    let avg = tape.constant(titles.averaging.clone());
    let mean = tape.matmul(avg, e)?;
    let q = tape.matmul(mean, proj)?;
    Ok(tape.value(q).clone())
}

/// Label-wise attention of `queries` over `encoded` tokens.
pub fn label_attention(
    encoded: &Tensor,
    queries: &Tensor,
    params: &RacParameters,
    config: &ModelConfig,
) -> Result<(Tensor, Tensor)> {
    if encoded.rows() == 0 || encoded.is_empty() {
        return Err(Error::Contract("label attention over zero tokens".into()));
    }
    let (mut tape, config) = eval_forward(config);
    let p = constant_params(&mut tape, params);
    let e = tape.constant(encoded.clone());
    let q = tape.constant(queries.clone());
    let mut f = Forward { tape: &mut tape, config: &config, mode: Mode::Eval, rng: None };
    let (a, c) = f.label_attention(&p, e, q)?;
    Ok((tape.value(a).clone(), tape.value(c).clone()))
}

/// Element-wise sigmoid of per-code logits.
pub fn score_codes(contexts: &Tensor, params: &RacParameters) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = constant_params(&mut tape, params);
    let c = tape.constant(contexts.clone());
    let config = ModelConfig::default();
    let mut f = Forward { tape: &mut tape, config: &config, mode: Mode::Eval, rng: None };
    let z = f.score(&p, c)?;
    let probs = tape.sigmoid(z);
    Ok(tape.value(probs).data().to_vec())
}
