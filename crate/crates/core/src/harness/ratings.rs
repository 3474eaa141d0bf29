use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Group, Rating};
use crate::corpus::read_jsonl;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub sheet_id: String,
    pub item_id: String,
    pub annotator_id: String,
    pub group: Group,
    pub rating: Rating,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl RatingRecord {
    fn key(&self) -> (&str, &str, &str) {
        (&self.sheet_id, &self.item_id, &self.annotator_id)
    }

    fn validate(&self) -> Result<()> {
        for (name, value) in
            [("sheet_id", &self.sheet_id), ("item_id", &self.item_id), ("annotator_id", &self.annotator_id)]
        {
            if value.trim().is_empty() {
                return Err(Error::Validation(format!("{name} must not be empty")));
            }
        }
        Ok(())
    }
}

/// A rating that replaced an earlier one from the same annotator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overwrite {
    pub previous: RatingRecord,
    pub replacement: RatingRecord,
}

/// Latest rating per (sheet, item, annotator), in order of first submission.
pub fn current_ratings(records: &[RatingRecord]) -> Vec<RatingRecord> {
    let mut slot: BTreeMap<(&str, &str, &str), usize> = BTreeMap::new();
    let mut out: Vec<RatingRecord> = Vec::new();
    for r in records {
        match slot.get(&r.key()) {
            Some(&i) => out[i] = r.clone(),
            None => {
                slot.insert(r.key(), out.len());
                out.push(r.clone());
            }
        }
    }
    out
}

/// Append-only JSONL store. Every submission is a new line, flushed to disk
/// before `submit` returns; overwritten ratings stay in the file and form
/// the audit trail.
pub struct RatingStore {
    path: PathBuf,
    file: File,
    records: Vec<RatingRecord>,
}

impl RatingStore {
    /// Opens the store, creating an empty file if none exists.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let records: Vec<RatingRecord> = read_jsonl(&path)?;
        for r in &records {
            r.validate()?;
        }
        Ok(Self { path, file, records })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Every record ever submitted, in submission order.
    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn current(&self) -> Vec<RatingRecord> {
        current_ratings(&self.records)
    }

    pub fn current_for(&self, sheet_id: &str) -> Vec<RatingRecord> {
        let mut out = self.current();
        out.retain(|r| r.sheet_id == sheet_id);
        out
    }

    pub fn find(&self, sheet_id: &str, item_id: &str, annotator_id: &str) -> Option<&RatingRecord> {
        self.records.iter().rev().find(|r| r.key() == (sheet_id, item_id, annotator_id))
    }

    /// Appends a rating. A second rating for the same item by the same
    /// annotator needs `overwrite`; an annotator keeps one group per sheet.
    /// Returns the replaced record, if any.
    pub fn submit(&mut self, record: RatingRecord, overwrite: bool) -> Result<Option<RatingRecord>> {
        record.validate()?;
        if let Some(other) =
            self.records.iter().find(|r| r.sheet_id == record.sheet_id && r.annotator_id == record.annotator_id)
        {
            if other.group != record.group {
                return Err(Error::Conflict(format!(
                    "annotator {} already rates sheet {} in group {}",
                    record.annotator_id, record.sheet_id, other.group
                )));
            }
        }
        let previous = self.find(&record.sheet_id, &record.item_id, &record.annotator_id).cloned();
        if previous.is_some() && !overwrite {
            return Err(Error::Conflict(format!(
                "annotator {} already rated item {} of sheet {}",
                record.annotator_id, record.item_id, record.sheet_id
            )));
        }
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        self.file.write_all(&line).and_then(|_| self.file.sync_data()).map_err(|e| Error::io(&self.path, e))?;
        self.records.push(record);
        Ok(previous)
    }

    pub fn audit_trail(&self) -> Vec<Overwrite> {
        let mut latest: BTreeMap<(&str, &str, &str), &RatingRecord> = BTreeMap::new();
        let mut out = Vec::new();
        for r in &self.records {
            if let Some(prev) = latest.insert(r.key(), r) {
                out.push(Overwrite { previous: prev.clone(), replacement: r.clone() });
            }
        }
        out
    }
}
