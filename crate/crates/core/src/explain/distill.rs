use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::FeatureExtractor;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::RacModel;
use crate::rng::{derive_seed, seeded};
use crate::tensor::sigmoid;

pub const STUDENTS_FILE: &str = "students.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L2 penalty on the weights (the bias is not penalized).
    pub weight_decay: f64,
    pub seed: u64,
    /// Weights kept per student after fitting; the survivors are refit.
    /// Zero keeps every weight.
    pub max_nonzero: usize,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { epochs: 1000, batch_size: 16, learning_rate: 0.25, weight_decay: 1e-4, seed: 7, max_nonzero: 32 }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Linear regressor from tf-idf features to one code's teacher logit.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub code: String,
    /// Dense, one entry per extractor feature.
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Mean squared error plus penalty after each epoch.
    pub loss_record: Vec<f64>,
    /// Set when the fit produced a non-finite loss; the student then
    /// predicts the mean teacher logit.
    pub diverged: bool,
}

impl StudentModel {
    pub fn logit(&self, features: &[(usize, f64)]) -> f64 {
        self.bias + features.iter().map(|&(j, v)| self.weights[j] * v).sum::<f64>()
    }

    pub fn nonzero(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }
}

/// Students for every code, tied to one feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentSet {
    pub extractor_digest: String,
    pub students: Vec<StudentModel>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    extractor_digest: String,
    feature_count: usize,
    codes: usize,
}

#[derive(Serialize, Deserialize)]
struct StudentRecord {
    code: String,
    bias: f32,
    weights: Vec<(usize, f32)>,
    final_loss: Option<f64>,
    diverged: bool,
}

impl StudentSet {
    pub fn get(&self, code: &str) -> Option<&StudentModel> {
        self.students.iter().find(|s| s.code == code)
    }

    pub fn position(&self, code: &str) -> Option<usize> {
        self.students.iter().position(|s| s.code == code)
    }

    pub fn check_extractor(&self, extractor: &FeatureExtractor) -> Result<()> {
        let digest = extractor.digest();
        if digest != self.extractor_digest {
            return Err(Error::Compatibility(format!(
                "students were fit on features {}, extractor is {digest}",
                self.extractor_digest
            )));
        }
        Ok(())
    }

    /// Per-code student logits `w_l · x + b_l`.
    pub fn logits(&self, extractor: &FeatureExtractor, text: &str) -> Result<Vec<f64>> {
        self.check_extractor(extractor)?;
        let x = extractor.transform(text);
        Ok(self.students.iter().map(|s| s.logit(&x)).collect())
    }

    /// Per-code probabilities `sigmoid(w_l · x + b_l)`.
    pub fn predict(&self, extractor: &FeatureExtractor, text: &str) -> Result<Vec<f64>> {
        Ok(self.logits(extractor, text)?.into_iter().map(sigmoid).collect())
    }

    /// JSONL: a header line, then one sparse student per code.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = Header {
            extractor_digest: self.extractor_digest.clone(),
            feature_count: self.students.first().map_or(0, |s| s.weights.len()),
            codes: self.students.len(),
        };
        let mut write_line = |bytes: Vec<u8>| -> Result<()> {
            out.write_all(&bytes).and_then(|_| out.write_all(b"\n")).map_err(|e| Error::io(path, e))
        };
        write_line(serde_json::to_vec(&header)?)?;
        for s in &self.students {
            let record = StudentRecord {
                code: s.code.clone(),
                bias: s.bias as f32,
                weights: s
                    .weights
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(j, &w)| (j, w as f32))
                    .collect(),
                final_loss: s.loss_record.last().copied().filter(|l| l.is_finite()),
                diverged: s.diverged,
            };
            write_line(serde_json::to_vec(&record)?)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let mut lines = BufReader::new(file).lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&line).map_err(|e| parse_err(1, e.to_string()))?
            }
            None => return Err(parse_err(1, "missing header line".into())),
        };
        let mut students = Vec::with_capacity(header.codes);
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: StudentRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            let mut weights = vec![0.0; header.feature_count];
            for (j, w) in r.weights {
                if j >= header.feature_count {
                    return Err(parse_err(i + 1, format!("feature {j} outside {} features", header.feature_count)));
                }
                weights[j] = w as f64;
            }
            students.push(StudentModel {
                code: r.code,
                weights,
                bias: r.bias as f64,
                loss_record: r.final_loss.into_iter().collect(),
                diverged: r.diverged,
            });
        }
        if students.len() != header.codes {
            return Err(Error::Corrupt(format!(
                "header announces {} students, file holds {}",
                header.codes,
                students.len()
            )));
        }
        Ok(Self { extractor_digest: header.extractor_digest, students })
    }
}

/// Fits one linear student per code to the teacher's logits on `dataset`.
/// The teacher is only read.
pub fn distill(
    teacher: &RacModel,
    dataset: &Dataset,
    extractor: &FeatureExtractor,
    config: &KdConfig,
) -> Result<StudentSet> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("distillation set is empty".into()));
    }
    let inputs: Vec<Vec<(usize, f64)>> = dataset.notes().par_iter().map(|n| extractor.transform(&n.text)).collect();
    let logits: Vec<Vec<f64>> = dataset
        .notes()
        .par_iter()
        .map(|n| teacher.predict(&n.text).map(|p| p.logits).map_err(|e| Error::Input(format!("note {}: {e}", n.id))))
        .collect::<Result<_>>()?;
    let students = (0..teacher.label_count())
        .into_par_iter()
        .map(|l| {
            let targets: Vec<f64> = logits.iter().map(|z| z[l]).collect();
            fit_student(
                teacher.codes.get(l).code.clone(),
                &inputs,
                &targets,
                extractor.len(),
                config,
                derive_seed(config.seed, l as u64),
            )
        })
        .collect();
    Ok(StudentSet { extractor_digest: extractor.digest(), students })
}

fn fit_student(
    code: String,
    inputs: &[Vec<(usize, f64)>],
    targets: &[f64],
    features: usize,
    config: &KdConfig,
    seed: u64,
) -> StudentModel {
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let mut student =
        StudentModel { code, weights: vec![0.0; features], bias: mean, loss_record: Vec::new(), diverged: false };
    let mut rng = seeded(seed);
    let ok = descend(&mut student, inputs, targets, None, config, &mut rng);
    if ok && config.max_nonzero > 0 && student.nonzero() > config.max_nonzero {
        let mut ranked: Vec<usize> = (0..features).collect();
        ranked.sort_by(|&a, &b| student.weights[b].abs().total_cmp(&student.weights[a].abs()).then(a.cmp(&b)));
        let mut keep = vec![false; features];
        for &j in &ranked[..config.max_nonzero] {
            keep[j] = true;
        }
        for (w, k) in student.weights.iter_mut().zip(&keep) {
            if !k {
                *w = 0.0;
            }
        }
        descend(&mut student, inputs, targets, Some(&keep), config, &mut rng);
    }
    if student.diverged {
        student.weights.iter_mut().for_each(|w| *w = 0.0);
        student.bias = mean;
    }
    // Stored as f32; rounding here keeps in-memory and reloaded students equal.
    student.weights.iter_mut().for_each(|w| *w = *w as f32 as f64);
    student.bias = student.bias as f32 as f64;
    student
}

/// Mini-batch gradient descent on mean squared error plus L2. Weights
/// outside `mask` stay fixed. Returns false on divergence.
fn descend(
    s: &mut StudentModel,
    inputs: &[Vec<(usize, f64)>],
    targets: &[f64],
    mask: Option<&[bool]>,
    config: &KdConfig,
    rng: &mut crate::rng::Rng,
) -> bool {
    let lr = config.learning_rate;
    let decay = 2.0 * config.weight_decay;
    let active: Vec<usize> = match mask {
        Some(m) => (0..m.len()).filter(|&j| m[j]).collect(),
        None => (0..s.weights.len()).collect(),
    };
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut grad = vec![0.0; s.weights.len()];
    let mut touched = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size) {
            let scale = 2.0 / batch.len() as f64;
            let mut grad_b = 0.0;
            for &i in batch {
                let r = s.logit(&inputs[i]) - targets[i];
                grad_b += r;
                for &(j, v) in &inputs[i] {
                    if allowed(j) {
                        if grad[j] == 0.0 {
                            touched.push(j);
                        }
                        grad[j] += r * v;
                    }
                }
            }
            if decay > 0.0 {
                for &j in &active {
                    s.weights[j] -= lr * decay * s.weights[j];
                }
            }
            for &j in &touched {
                s.weights[j] -= lr * scale * grad[j];
                grad[j] = 0.0;
            }
            touched.clear();
            s.bias -= lr * scale * grad_b;
        }
        let mse = inputs.iter().zip(targets).map(|(x, z)| (s.logit(x) - z).powi(2)).sum::<f64>() / inputs.len() as f64;
        let penalty = config.weight_decay * s.weights.iter().map(|w| w * w).sum::<f64>();
        let loss = mse + penalty;
        s.loss_record.push(loss);
        if !loss.is_finite() {
            s.diverged = true;
            return false;
        }
    }
    true
}
