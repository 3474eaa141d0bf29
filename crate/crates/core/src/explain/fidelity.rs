use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distill::StudentSet;
use super::features::FeatureExtractor;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::RacModel;
use crate::tensor::sigmoid;
use crate::train::check_threshold;

/// Codes need this many positive teacher decisions to enter the macro
/// averages.
pub const MIN_TEACHER_POSITIVES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeFidelity {
    pub code: String,
    /// Pearson correlation of teacher and student logits; `None` when
    /// either side is constant.
    pub correlation: Option<f64>,
    /// Fraction of notes where both models make the same decision at τ.
    pub agreement: f64,
    pub teacher_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub threshold: f64,
    pub codes: Vec<CodeFidelity>,
    pub macro_correlation: Option<f64>,
    pub macro_agreement: Option<f64>,
}

/// Sample Pearson correlation; `None` for fewer than two points or zero
/// variance on either side.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Fidelity from per-note logit rows (`notes x codes`) of both models.
pub fn fidelity_from_logits(
    codes: &[String],
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    threshold: f64,
) -> Result<FidelityReport> {
    check_threshold(threshold)?;
    if teacher.is_empty() || teacher.len() != student.len() {
        return Err(Error::Contract(format!("{} teacher rows for {} student rows", teacher.len(), student.len())));
    }
    if teacher.iter().chain(student).any(|r| r.len() != codes.len()) {
        return Err(Error::Contract(format!("logit rows must have {} codes", codes.len())));
    }
    let n = teacher.len();
    let per_code: Vec<CodeFidelity> = codes
        .iter()
        .enumerate()
        .map(|(l, code)| {
            let t: Vec<f64> = teacher.iter().map(|r| r[l]).collect();
            let s: Vec<f64> = student.iter().map(|r| r[l]).collect();
            let decide = |z: f64| sigmoid(z) >= threshold;
            let agree = t.iter().zip(&s).filter(|(a, b)| decide(**a) == decide(**b)).count();
            CodeFidelity {
                code: code.clone(),
                correlation: pearson(&t, &s),
                agreement: agree as f64 / n as f64,
                teacher_positives: t.iter().filter(|z| decide(**z)).count(),
            }
        })
        .collect();
    let eligible: Vec<&CodeFidelity> =
        per_code.iter().filter(|c| c.teacher_positives >= MIN_TEACHER_POSITIVES).collect();
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    Ok(FidelityReport {
        threshold,
        macro_correlation: mean(eligible.iter().filter_map(|c| c.correlation).collect()),
        macro_agreement: mean(eligible.iter().map(|c| c.agreement).collect()),
        codes: per_code,
    })
}

/// Teacher and student logits for every note, `notes x codes` each.
pub fn collect_logits(
    teacher: &RacModel,
    students: &StudentSet,
    extractor: &FeatureExtractor,
    dataset: &Dataset,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let teacher_codes: Vec<&str> = teacher.codes.entries().iter().map(|e| e.code.as_str()).collect();
    let student_codes: Vec<&str> = students.students.iter().map(|s| s.code.as_str()).collect();
    if teacher_codes != student_codes {
        return Err(Error::Compatibility("students and teacher cover different code lists".into()));
    }
    students.check_extractor(extractor)?;
    dataset
        .notes()
        .par_iter()
        .map(|n| {
            let t = teacher.predict(&n.text)?.logits;
            let s = students.logits(extractor, &n.text)?;
            Ok((t, s))
        })
        .collect::<Result<Vec<_>>>()
        .map(|rows| rows.into_iter().unzip())
}

pub fn fidelity(
    teacher: &RacModel,
    students: &StudentSet,
    extractor: &FeatureExtractor,
    dataset: &Dataset,
    threshold: f64,
) -> Result<FidelityReport> {
    let (t, s) = collect_logits(teacher, students, extractor, dataset)?;
    let codes: Vec<String> = teacher.codes.entries().iter().map(|e| e.code.clone()).collect();
    fidelity_from_logits(&codes, &t, &s, threshold)
}
