use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ratings::{current_ratings, RatingRecord};
use super::{empty_histogram, proportions, Group, Histogram, Rating};
use crate::error::{Error, Result};
use crate::explain::Method;

/// Agreement below this value is flagged in reports.
pub const REPORTED_CONSISTENCY_THRESHOLD: f64 = 0.40;

pub fn below_reported_threshold(jaccard: f64) -> bool {
    jaccard < REPORTED_CONSISTENCY_THRESHOLD
}

/// The rating with strictly more votes than any other. Ties for first
/// place resolve to `irrelevant`; no votes yield `None`.
pub fn majority(votes: &[Rating]) -> Option<Rating> {
    if votes.is_empty() {
        return None;
    }
    let mut hist = empty_histogram();
    for v in votes {
        *hist.get_mut(v).unwrap() += 1;
    }
    let top = *hist.values().max().unwrap();
    let mut leaders = hist.iter().filter(|(_, c)| **c == top);
    match (leaders.next(), leaders.next()) {
        (Some((r, _)), None) => Some(*r),
        _ => Some(Rating::Irrelevant),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDistribution {
    pub group: Group,
    pub annotators: usize,
    /// Group verdict per item.
    pub items: BTreeMap<String, Rating>,
    /// Verdict counts over items.
    pub histogram: Histogram,
    pub proportions: BTreeMap<Rating, f64>,
    /// Raw counts over individual ratings.
    pub rating_counts: Histogram,
}

fn sheet_of(records: &[RatingRecord]) -> Result<&str> {
    let ids: BTreeSet<&str> = records.iter().map(|r| r.sheet_id.as_str()).collect();
    match ids.len() {
        0 => Err(Error::Contract("no ratings".into())),
        1 => Ok(ids.into_iter().next().unwrap()),
        _ => Err(Error::Contract(format!("ratings span several sheets: {ids:?}"))),
    }
}

/// Verdict histogram of one group. Superseded ratings are ignored.
pub fn group_distribution(records: &[RatingRecord], group: Group) -> Result<GroupDistribution> {
    let current = current_ratings(records);
    let mine: Vec<&RatingRecord> = current.iter().filter(|r| r.group == group).collect();
    if mine.is_empty() {
        return Err(Error::Contract(format!("no ratings from group {group}")));
    }
    sheet_of(&current)?;
    let mut votes: BTreeMap<String, Vec<Rating>> = BTreeMap::new();
    let mut rating_counts = empty_histogram();
    let mut annotators = BTreeSet::new();
    for r in &mine {
        votes.entry(r.item_id.clone()).or_default().push(r.rating);
        *rating_counts.get_mut(&r.rating).unwrap() += 1;
        annotators.insert(r.annotator_id.as_str());
    }
    let items: BTreeMap<String, Rating> = votes.into_iter().map(|(item, v)| (item, majority(&v).unwrap())).collect();
    let histogram = verdict_histogram(items.values());
    Ok(GroupDistribution {
        group,
        annotators: annotators.len(),
        proportions: proportions(&histogram),
        histogram,
        items,
        rating_counts,
    })
}

fn verdict_histogram<'a>(verdicts: impl Iterator<Item = &'a Rating>) -> Histogram {
    let mut h = empty_histogram();
    for v in verdicts {
        *h.get_mut(v).unwrap() += 1;
    }
    h
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub annotators: usize,
    pub items_rated: usize,
    /// Compared items whose verdict is informative or better.
    pub informative_items: BTreeSet<String>,
    /// Verdict histogram over every item the group rated.
    pub histogram: Histogram,
    pub proportions: BTreeMap<Rating, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodBreakdown {
    pub items_compared: usize,
    pub jaccard: f64,
    /// Verdict histograms over the group's rated items of this method.
    pub histograms: BTreeMap<Group, Histogram>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub sheet_id: String,
    pub jaccard: f64,
    pub threshold: f64,
    pub below_reported_threshold: bool,
    /// Items rated by both groups; the Jaccard sets are drawn from these.
    pub items_compared: usize,
    pub groups: BTreeMap<Group, GroupSummary>,
    /// Per-method figures for items found in `methods`.
    pub per_method: BTreeMap<Method, MethodBreakdown>,
}

/// Jaccard similarity of the two groups' informative-or-better item sets,
/// over the items both groups rated. `methods` maps item ids to the method
/// that produced them and may be empty.
pub fn inter_group_consistency(
    records: &[RatingRecord],
    a: Group,
    b: Group,
    methods: &BTreeMap<String, Method>,
) -> Result<ConsistencyReport> {
    if a == b {
        return Err(Error::Contract("consistency needs two different groups".into()));
    }
    let sheet_id = sheet_of(records)?.to_string();
    let da = group_distribution(records, a)?;
    let db = group_distribution(records, b)?;
    let shared: BTreeSet<&String> = da.items.keys().filter(|k| db.items.contains_key(*k)).collect();
    if shared.is_empty() {
        return Err(Error::Contract(format!("groups {a} and {b} rated disjoint items")));
    }
    let informative = |d: &GroupDistribution, keep: &dyn Fn(&String) -> bool| -> BTreeSet<String> {
        d.items
            .iter()
            .filter(|(item, v)| shared.contains(item) && keep(item) && v.is_informative())
            .map(|(item, _)| item.clone())
            .collect()
    };
    let all = |_: &String| true;
    let (sa, sb) = (informative(&da, &all), informative(&db, &all));
    let j = jaccard(&sa, &sb);

    let mut per_method = BTreeMap::new();
    let present: BTreeSet<Method> = methods.values().copied().collect();
    for m in present {
        let of_m = |item: &String| methods.get(item) == Some(&m);
        let histograms = [&da, &db]
            .into_iter()
            .map(|d| {
                let h = verdict_histogram(d.items.iter().filter(|(i, _)| of_m(i)).map(|(_, v)| v));
                (d.group, h)
            })
            .collect();
        per_method.insert(
            m,
            MethodBreakdown {
                items_compared: shared.iter().filter(|i| of_m(i)).count(),
                jaccard: jaccard(&informative(&da, &of_m), &informative(&db, &of_m)),
                histograms,
            },
        );
    }

    let summary = |d: &GroupDistribution, set: BTreeSet<String>| GroupSummary {
        annotators: d.annotators,
        items_rated: d.items.len(),
        informative_items: set,
        histogram: d.histogram.clone(),
        proportions: d.proportions.clone(),
    };
    let groups = BTreeMap::from([(a, summary(&da, sa)), (b, summary(&db, sb))]);
    Ok(ConsistencyReport {
        sheet_id,
        jaccard: j,
        threshold: REPORTED_CONSISTENCY_THRESHOLD,
        below_reported_threshold: below_reported_threshold(j),
        items_compared: shared.len(),
        groups,
        per_method,
    })
}
