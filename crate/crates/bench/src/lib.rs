//! Shared fixtures for the benchmarks.

use racx::corpus::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
use racx::explain::{distill, FeatureExtractor, KdConfig, StudentSet};
use racx::model::{ModelConfig, RacModel};
use racx::train::{train, TrainConfig};
use racx::Result;

/// The default 32-note, 8-code synthetic corpus.
pub fn corpus() -> Result<SyntheticCorpus> {
    generate_synthetic_corpus(&SyntheticSpec::default())
}

/// An untrained model at the default architecture; forward cost does not
/// depend on the weights.
pub fn model(corpus: &SyntheticCorpus) -> Result<RacModel> {
    let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
    Ok(train(&corpus.dataset, &corpus.codes, &ModelConfig::default(), &config, 1)?.model)
}

pub fn students(model: &RacModel, corpus: &SyntheticCorpus) -> Result<(StudentSet, FeatureExtractor)> {
    let extractor = FeatureExtractor::build(&corpus.dataset, 20_000)?;
    let config = KdConfig { epochs: 50, ..KdConfig::default() };
    let students = distill(model, &corpus.dataset, &extractor, &config)?;
    Ok((students, extractor))
}
