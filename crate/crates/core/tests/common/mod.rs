#![allow(dead_code)]

use racx::corpus::{CodeEntry, CodeKind, CodeVocabulary, TokenVocabulary};
use racx::model::{ModelConfig, RacModel};

pub const WORDS: [&str; 9] = ["<pad>", "<unk>", "fever", "rash", "cough", "pain", "noted", "chest", "scan"];

pub fn codes() -> CodeVocabulary {
    let entry = |code: &str, title: &str, kind| CodeEntry { code: code.into(), title: title.into(), kind };
    CodeVocabulary::new(vec![
        entry("D1", "fever rash", CodeKind::Diagnosis),
        entry("D2", "chest pain", CodeKind::Diagnosis),
        entry("P1", "scan", CodeKind::Procedure),
    ])
    .unwrap()
}

pub fn tokens() -> TokenVocabulary {
    TokenVocabulary::from_tokens(WORDS.iter().map(|w| w.to_string()).collect()).unwrap()
}

pub fn small_config(embed_dim: usize, heads: usize, layers: usize) -> ModelConfig {
    let mut config = ModelConfig::new(WORDS.len(), 3);
    config.embed_dim = embed_dim;
    config.attention_heads = heads;
    config.ffn_dim = 2 * embed_dim;
    config.conv_width = 3;
    config.encoder_layers = layers;
    config.seed = 5;
    config
}

pub fn tiny_model() -> RacModel {
    RacModel::new(small_config(8, 2, 2), tokens(), codes()).unwrap()
}
