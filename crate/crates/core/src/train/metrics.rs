//! Multi-label metrics over per-note code sets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean binary cross-entropy over codes, with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_multilabel_loss(probabilities: &[f64], gold: &[bool]) -> f64 {
    const CLAMP: f64 = 1e-7;
    let n = probabilities.len().max(1) as f64;
    probabilities
        .iter()
        .zip(gold)
        .map(|(&p, &y)| {
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

/// Codes with `p >= threshold`; when none qualify, the single most probable
/// code (earliest index on ties).
pub fn predict_codes(probabilities: &[f64], threshold: f64) -> BTreeSet<usize> {
    let picked: BTreeSet<usize> =
        probabilities.iter().enumerate().filter(|(_, &p)| p >= threshold).map(|(i, _)| i).collect();
    if !picked.is_empty() || probabilities.is_empty() {
        return picked;
    }
    let mut best = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[best] {
            best = i;
        }
    }
    BTreeSet::from([best])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// `2tp / (2tp + fp + fn)`, taken as 1 when there were no decisions.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_aligned<T>(predicted: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Result<()> {
    if predicted.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    if predicted.len() != gold.len() {
        return Err(Error::Contract(format!("{} predicted sets for {} gold sets", predicted.len(), gold.len())));
    }
    Ok(())
}

/// Per-code confusion counts for every code in gold ∪ predicted.
pub fn per_code_counts<T: Ord + Clone>(predicted: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Result<BTreeMap<T, Counts>> {
    check_aligned(predicted, gold)?;
    let mut table: BTreeMap<T, Counts> = BTreeMap::new();
    for (p, g) in predicted.iter().zip(gold) {
        for c in p.intersection(g) {
            table.entry(c.clone()).or_default().tp += 1;
        }
        for c in p.difference(g) {
            table.entry(c.clone()).or_default().fp += 1;
        }
        for c in g.difference(p) {
            table.entry(c.clone()).or_default().fn_ += 1;
        }
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 over pooled (note, code) decisions.
pub fn micro_scores<T: Ord + Clone>(predicted: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Result<MicroScores> {
    let mut pooled = Counts::default();
    for c in per_code_counts(predicted, gold)?.into_values() {
        pooled.add(c);
    }
    Ok(MicroScores { precision: pooled.precision(), recall: pooled.recall(), f1: pooled.f1() })
}

pub fn micro_f1<T: Ord + Clone>(predicted: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Result<f64> {
    Ok(micro_scores(predicted, gold)?.f1)
}

/// Unweighted mean of per-code F1 over codes that occur in gold or
/// predicted sets; codes in neither are skipped.
pub fn macro_f1<T: Ord + Clone>(predicted: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Result<f64> {
    let table = per_code_counts(predicted, gold)?;
    if table.is_empty() {
        return Ok(1.0);
    }
    Ok(table.values().map(Counts::f1).sum::<f64>() / table.len() as f64)
}

/// `Σ|A ∩ B| / Σ|A ∪ B|` over pairs; 1 when every pair is empty.
pub fn micro_jaccard<T: Ord>(pairs: &[(BTreeSet<T>, BTreeSet<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("micro-Jaccard needs at least one pair".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pairs {
        let i = a.intersection(b).count();
        inter += i;
        union += a.len() + b.len() - i;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean over notes of the fraction of the top-`k` codes (by probability,
/// earlier index on ties) that are gold.
pub fn precision_at_k(probabilities: &[Vec<f64>], gold: &[BTreeSet<usize>], k: usize) -> Result<f64> {
    if probabilities.is_empty() || probabilities.len() != gold.len() {
        return Err(Error::Contract(format!("{} probability rows for {} gold sets", probabilities.len(), gold.len())));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut total = 0.0;
    for (probs, g) in probabilities.iter().zip(gold) {
        if k > probs.len() {
            return Err(Error::Config(format!("k={k} exceeds {} codes", probs.len())));
        }
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let hits = order[..k].iter().filter(|c| g.contains(c)).count();
        total += hits as f64 / k as f64;
    }
    Ok(total / probabilities.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro_p: f64,
    pub micro_r: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub micro_jaccard: f64,
    pub precision_at_k: BTreeMap<String, f64>,
    pub per_code: BTreeMap<String, Counts>,
}

impl MetricsReport {
    /// Builds the full report. `ks` larger than the code count are skipped.
    pub fn compute(
        code_names: &[String],
        probabilities: &[Vec<f64>],
        predicted: &[BTreeSet<usize>],
        gold: &[BTreeSet<usize>],
        ks: &[usize],
    ) -> Result<Self> {
        let micro = micro_scores(predicted, gold)?;
        let pairs: Vec<(BTreeSet<usize>, BTreeSet<usize>)> =
            predicted.iter().cloned().zip(gold.iter().cloned()).collect();
        let mut pk = BTreeMap::new();
        for &k in ks {
            if k >= 1 && k <= code_names.len() {
                pk.insert(k.to_string(), precision_at_k(probabilities, gold, k)?);
            }
        }
        let per_code =
            per_code_counts(predicted, gold)?.into_iter().map(|(c, counts)| (code_names[c].clone(), counts)).collect();
        Ok(Self {
            micro_p: micro.precision,
            micro_r: micro.recall,
            micro_f1: micro.f1,
            macro_f1: macro_f1(predicted, gold)?,
            micro_jaccard: micro_jaccard(&pairs)?,
            precision_at_k: pk,
            per_code,
        })
    }

    /// `code,tp,fp,fn,f1` rows.
    pub fn per_code_csv(&self) -> String {
        let mut out = String::from("code,tp,fp,fn,f1\n");
        for (code, c) in &self.per_code {
            out.push_str(&format!("{code},{},{},{},{:.6}\n", c.tp, c.fp, c.fn_, c.f1()));
        }
        out
    }
}
