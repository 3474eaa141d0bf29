//! Human-graded evaluation of explanations.
//!
//! A [`QuestionSheet`] lists (note, code, snippet) items with the producing
//! method hidden from annotators. Annotators in two groups rate each item
//! on a three-level scale; ratings go to an append-only [`RatingStore`].
//! [`inter_group_consistency`] reduces each group to per-item majority
//! verdicts and reports the Jaccard similarity of the items each group
//! found informative. [`human_baseline_compare`] compares coder and system
//! code assignments against a reference by micro-Jaccard.
//!
//! Two interpretation rules apply throughout:
//!
//! - An item's group verdict is the rating with a strict plurality of the
//!   group's votes. Any tie for first place resolves to `irrelevant`.
//! - An item belongs to a group's Jaccard set when its verdict is
//!   `informative` or `highly_informative`.

mod agreement;
mod baseline;
mod ratings;
mod sheet;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use agreement::{
    below_reported_threshold, group_distribution, inter_group_consistency, majority, ConsistencyReport,
    GroupDistribution, GroupSummary, MethodBreakdown, REPORTED_CONSISTENCY_THRESHOLD,
};
pub use baseline::{human_baseline_compare, load_coder_annotations, ratio, BaselineReport, CoderAnnotation};
pub use ratings::{current_ratings, Overwrite, RatingRecord, RatingStore};
pub use sheet::{build_question_sheet, BlindedItem, BlindedSheet, QuestionSheet, SheetConfig, SheetItem};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rating {
    HighlyInformative,
    Informative,
    Irrelevant,
}

impl Rating {
    pub const ALL: [Rating; 3] = [Rating::HighlyInformative, Rating::Informative, Rating::Irrelevant];

    pub fn as_str(&self) -> &'static str {
        match self {
            Rating::HighlyInformative => "highly_informative",
            Rating::Informative => "informative",
            Rating::Irrelevant => "irrelevant",
        }
    }

    pub fn is_informative(&self) -> bool {
        !matches!(self, Rating::Irrelevant)
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rating {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rating::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| {
            Error::Validation(format!("invalid rating {s:?}, expected highly_informative, informative or irrelevant"))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::A => "A",
            Group::B => "B",
        })
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Group::A),
            "B" | "b" => Ok(Group::B),
            other => Err(Error::Validation(format!("invalid group {other:?}, expected A or B"))),
        }
    }
}

/// Counts per rating; every rating is present, possibly with zero.
pub type Histogram = BTreeMap<Rating, usize>;

pub(crate) fn empty_histogram() -> Histogram {
    Rating::ALL.into_iter().map(|r| (r, 0)).collect()
}

pub(crate) fn proportions(hist: &Histogram) -> BTreeMap<Rating, f64> {
    let total: usize = hist.values().sum();
    hist.iter().map(|(r, c)| (*r, if total == 0 { 0.0 } else { *c as f64 / total as f64 })).collect()
}
