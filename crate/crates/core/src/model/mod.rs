//! The label-attention network.
//!
//! Pipeline per note: token embeddings plus per-sentence positional
//! encodings, a width-`W` convolution that never crosses a sentence
//! boundary, a stack of unmasked transformer encoder blocks, then one
//! attention distribution per code whose query comes from the code's title.
//! Each code's attended context is scored by its own vector and bias.
//!
//! Because positions restart at each sentence, convolution stays inside a
//! sentence and self-attention carries no positional bias, reordering whole
//! sentences permutes the token rows but leaves every code probability
//! unchanged.

mod checkpoint;
mod config;
mod forward;
mod params;

use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, VocabDigests, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use forward::{
    code_title_queries, constant_params, embed_and_convolve, encode_note, encoder_forward, label_attention,
    register_params, score_codes, sentence_positions, EncodedNote, ForwardVars, Mode, TitleTokens,
};
pub use params::{expected_shapes, EncoderLayer, Params, RacParameters};

pub(crate) use forward::Forward;

use crate::corpus::{CodeVocabulary, TokenVocabulary};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_FILE: &str = "model.racx";
pub const TOKENS_FILE: &str = "tokens.json";
pub const CODES_FILE: &str = "codes.jsonl";

/// Per-code output of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CodePrediction {
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
    /// `L x T`; row `l` is code `l`'s distribution over the note tokens.
    pub attention: Tensor,
    pub encoded: EncodedNote,
}

impl CodePrediction {
    pub fn token_spans(&self) -> &[Range<usize>] {
        &self.encoded.spans
    }

    pub fn attention_row(&self, code: usize) -> &[f64] {
        self.attention.row(code)
    }
}

/// Parameters bound to the vocabularies they were trained with.
#[derive(Clone, Debug)]
pub struct RacModel {
    pub config: ModelConfig,
    pub params: RacParameters,
    pub tokens: TokenVocabulary,
    pub codes: CodeVocabulary,
    titles: TitleTokens,
}

impl RacModel {
    /// Fresh seeded model. The per-code scoring vectors start equal to the
    /// title queries.
    pub fn new(config: ModelConfig, tokens: TokenVocabulary, codes: CodeVocabulary) -> Result<Self> {
        check_binding(&config, &tokens, &codes)?;
        let mut params = RacParameters::init(&config)?;
        let titles = TitleTokens::new(&codes, &tokens)?;
        params.output_weight = code_title_queries(&titles, &params)?;
        Ok(Self { config, params, tokens, codes, titles })
    }

    pub fn from_parts(
        config: ModelConfig,
        params: RacParameters,
        tokens: TokenVocabulary,
        codes: CodeVocabulary,
    ) -> Result<Self> {
        check_binding(&config, &tokens, &codes)?;
        params.check_shapes(&config)?;
        let titles = TitleTokens::new(&codes, &tokens)?;
        Ok(Self { config, params, tokens, codes, titles })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        let bytes = encode_checkpoint(&self.params, &self.config, &self.digests())?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }

    pub fn titles(&self) -> &TitleTokens {
        &self.titles
    }

    pub fn label_count(&self) -> usize {
        self.codes.len()
    }

    pub fn encode(&self, text: &str) -> Result<EncodedNote> {
        encode_note(text, &self.tokens, self.config.max_tokens)
    }

    pub fn digests(&self) -> VocabDigests {
        VocabDigests { tokens: self.tokens.digest(), codes: self.codes.digest() }
    }

    /// Eval-mode forward on raw text.
    pub fn predict(&self, text: &str) -> Result<CodePrediction> {
        let encoded = self.encode(text)?;
        self.forward(encoded, Mode::Eval, None)
    }

    /// Forward pass on an encoded note. Dropout applies only in
    /// [`Mode::Train`] with a generator supplied.
    pub fn forward(&self, encoded: EncodedNote, mode: Mode, rng: Option<&mut Rng>) -> Result<CodePrediction> {
        let mut tape = Tape::new();
        let p = constant_params(&mut tape, &self.params);
        let vars = Forward { tape: &mut tape, config: &self.config, mode, rng }.run(&p, &self.titles, &encoded)?;
        Ok(CodePrediction {
            probabilities: tape.value(vars.probabilities).data().to_vec(),
            logits: tape.value(vars.logits).data().to_vec(),
            attention: tape.value(vars.attention).clone(),
            encoded,
        })
    }

    /// Mean binary cross-entropy of the code logits against 0/1 `targets`
    /// and its gradient for every parameter, in [`Params::named`] order.
    /// Parameters the loss does not reach get zero gradients.
    pub fn loss_and_gradients(
        &self,
        encoded: &EncodedNote,
        targets: &[f64],
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = register_params(&mut tape, &self.params);
        let vars = Forward { tape: &mut tape, config: &self.config, mode, rng }.run(&p, &self.titles, encoded)?;
        let loss = tape.bce_with_logits(vars.logits, targets)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let out = p
            .named()
            .into_iter()
            .zip(self.params.named())
            .map(|((_, &var), (_, param))| grads.take(var).unwrap_or_else(|| Tensor::zeros(param.shape())))
            .collect();
        Ok((value, out))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.params, &self.config, &self.digests(), path)
    }

    /// Writes checkpoint, token vocabulary and code vocabulary into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.save_checkpoint(dir.join(CHECKPOINT_FILE))?;
        self.tokens.save(dir.join(TOKENS_FILE))?;
        self.codes.save(dir.join(CODES_FILE))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let tokens = TokenVocabulary::load(dir.join(TOKENS_FILE))?;
        let codes = CodeVocabulary::load(dir.join(CODES_FILE))?;
        let ckpt = load_checkpoint(dir.join(CHECKPOINT_FILE))?;
        ckpt.verify(&tokens, &codes)?;
        Self::from_parts(ckpt.config, ckpt.params, tokens, codes)
    }
}

fn check_binding(config: &ModelConfig, tokens: &TokenVocabulary, codes: &CodeVocabulary) -> Result<()> {
    config.validate()?;
    if config.vocab_size != tokens.len() || config.label_count != codes.len() {
        return Err(Error::Config(format!(
            "config expects |V|={} and L={}, vocabularies have {} tokens and {} codes",
            config.vocab_size,
            config.label_count,
            tokens.len(),
            codes.len()
        )));
    }
    Ok(())
}
