//! Mini-batch training with Adam, early stopping on validation micro-F1,
//! thresholded decoding and evaluation.

mod metrics;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{
    bce_multilabel_loss, macro_f1, micro_f1, micro_jaccard, micro_scores, per_code_counts, precision_at_k,
    predict_codes, Counts, MetricsReport, MicroScores,
};

use crate::corpus::{CodeVocabulary, Dataset, TokenVocabulary};
use crate::error::{Error, Result};
use crate::model::{EncodedNote, Mode, ModelConfig, RacModel, RacParameters};
use crate::rng::{derive_seed, derived, seeded};
use crate::tensor::{AdamConfig, AdamState, Tensor};

/// Default `k` values reported by [`evaluate`].
pub const REPORT_KS: [usize; 2] = [5, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub threshold: f64,
    pub patience: usize,
    pub seed: u64,
    /// Fraction of notes held out for early stopping. With no held-out
    /// notes the training notes are used for validation.
    pub eval_split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 8,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            threshold: 0.5,
            patience: 20,
            seed: 7,
            eval_split: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        check_threshold(self.threshold)?;
        if !(0.0..1.0).contains(&self.eval_split) {
            return Err(Error::Config(format!("eval_split {} outside [0, 1)", self.eval_split)));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold {threshold} outside (0, 1)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation micro-F1.
    pub model: RacModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

/// Builds the token vocabulary from `dataset`, initializes a model and
/// trains it.
pub fn train(
    dataset: &Dataset,
    codes: &CodeVocabulary,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    min_freq: usize,
) -> Result<TrainOutcome> {
    dataset.validate(codes)?;
    let tokens = TokenVocabulary::build(dataset, codes, min_freq)?;
    let config = ModelConfig { vocab_size: tokens.len(), label_count: codes.len(), ..model_config.clone() };
    let model = RacModel::new(config, tokens, codes.clone())?;
    train_model(model, dataset, train_config)
}

struct Example {
    encoded: EncodedNote,
    targets: Vec<f64>,
    gold: BTreeSet<usize>,
}

fn prepare(model: &RacModel, dataset: &Dataset) -> Result<Vec<Example>> {
    dataset
        .notes()
        .iter()
        .map(|note| {
            let gold = gold_indices(&model.codes, &note.gold_codes)?;
            let mut targets = vec![0.0; model.label_count()];
            for &c in &gold {
                targets[c] = 1.0;
            }
            let encoded = model.encode(&note.text).map_err(|e| Error::Input(format!("note {}: {e}", note.id)))?;
            Ok(Example { encoded, targets, gold })
        })
        .collect()
}

pub fn gold_indices(codes: &CodeVocabulary, gold: &BTreeSet<String>) -> Result<BTreeSet<usize>> {
    gold.iter().map(|c| codes.position(c).ok_or_else(|| Error::Validation(format!("unknown code {c}")))).collect()
}

/// Trains an initialized model in place of its current parameters.
pub fn train_model(mut model: RacModel, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let examples = prepare(&model, dataset)?;
    if examples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if config.epochs == 0 {
        return Ok(TrainOutcome { model, log: Vec::new(), best_epoch: None });
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut seeded(config.seed));
    let held_out = (config.eval_split * examples.len() as f64).round() as usize;
    let (validation, train_idx) = order.split_at(held_out.min(examples.len() - 1));
    let validation: Vec<usize> = if validation.is_empty() { train_idx.to_vec() } else { validation.to_vec() };
    let mut train_idx = train_idx.to_vec();

    let mut adam = AdamState::new(
        AdamConfig { learning_rate: config.learning_rate, weight_decay: config.weight_decay, ..AdamConfig::default() },
        model.params.named().into_iter().map(|(_, t)| t),
    );

    let mut log = Vec::new();
    let mut best: Option<((f64, f64), usize, RacParameters)> = None;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let epoch_seed = derive_seed(config.seed, epoch as u64);
        train_idx.sort_unstable();
        train_idx.shuffle(&mut seeded(epoch_seed));

        let mut loss_sum = 0.0;
        for (batch_no, batch) in train_idx.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
                .par_iter()
                .map(|&i| note_gradients(&model, &examples[i], derive_seed(epoch_seed, i as u64)))
                .collect();
            let mut total: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) =
                    r.map_err(|e| Error::Training { epoch, batch: batch_no, message: e.to_string() })?;
                batch_loss += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Training { epoch, batch: batch_no, message: format!("loss is {batch_loss}") });
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> =
                total.expect("batches are non-empty").into_iter().map(|g| g.map(|v| v * scale)).collect();
            let mut named = model.params.named_mut();
            let mut slots: Vec<(&str, &mut Tensor)> = named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
            adam.step(&mut slots, &grads).map_err(|e| Error::Training {
                epoch,
                batch: batch_no,
                message: e.to_string(),
            })?;
            loss_sum += batch_loss * batch.len() as f64;
        }

        let (report, validation_loss) = evaluate_examples(&model, &examples, &validation, config.threshold)?;
        let score = (report.micro_f1, -validation_loss);
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            validation_loss,
            validation: report,
        });
        // Equal F1 with lower validation loss also counts as progress.
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome { model, log, best_epoch: Some(best_epoch) })
}

/// Mean BCE loss for one note and the gradient of every parameter, in
/// [`crate::model::Params::named`] order.
fn note_gradients(model: &RacModel, example: &Example, seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let mut rng = derived(seed, 0);
    model.loss_and_gradients(&example.encoded, &example.targets, Mode::Train, Some(&mut rng))
}

fn evaluate_examples(
    model: &RacModel,
    examples: &[Example],
    indices: &[usize],
    threshold: f64,
) -> Result<(MetricsReport, f64)> {
    let probabilities: Vec<Vec<f64>> = indices
        .par_iter()
        .map(|&i| model.forward(examples[i].encoded.clone(), Mode::Eval, None).map(|p| p.probabilities))
        .collect::<Result<_>>()?;
    let predicted: Vec<BTreeSet<usize>> = probabilities.iter().map(|p| predict_codes(p, threshold)).collect();
    let gold: Vec<BTreeSet<usize>> = indices.iter().map(|&i| examples[i].gold.clone()).collect();
    let loss = indices
        .iter()
        .zip(&probabilities)
        .map(|(&i, p)| {
            let y: Vec<bool> = examples[i].targets.iter().map(|&t| t > 0.5).collect();
            bce_multilabel_loss(p, &y)
        })
        .sum::<f64>()
        / indices.len() as f64;
    let names: Vec<String> = model.codes.entries().iter().map(|e| e.code.clone()).collect();
    let report = MetricsReport::compute(&names, &probabilities, &predicted, &gold, &REPORT_KS)?;
    Ok((report, loss))
}

/// Eval-mode metrics of `model` on every note of `dataset`.
pub fn evaluate(model: &RacModel, dataset: &Dataset, threshold: f64) -> Result<MetricsReport> {
    check_threshold(threshold)?;
    let examples = prepare(model, dataset)?;
    if examples.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let all: Vec<usize> = (0..examples.len()).collect();
    Ok(evaluate_examples(model, &examples, &all, threshold)?.0)
}
