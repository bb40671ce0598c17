//! The knowledge base: categorized rows of entities crossed with typed
//! columns, where every cell carries an optional value, a confidence and
//! the pool of candidate answers players have offered for it.
//!
//! The on-disk form is a single UTF-8 JSON document:
//!
//! ```json
//! { "categories": ["faculty"],
//!   "columns": [{"name": "rank", "slot_type": "TEXT", "difficulty": 0.2, "importance": 0}],
//!   "templates": [{"pattern": "What is the {Column Name} of {Entity Name}?", "column": "rank", "answer_slot": "TEXT"}],
//!   "rows": [{"id": "r1", "entity_name": "Dana Whitfield", "category": "faculty",
//!             "cells": {"rank": {"value": "associate", "confidence": 0.4, "candidates": []}}}] }
//! ```
//!
//! [`KnowledgeBase::save`] always writes rows sorted by id, and
//! [`KnowledgeBase::load`] sorts them the same way, so a load/save/load
//! cycle is the identity.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::query_gen::QueryTemplate;
use crate::scoring::{AnswerRecord, ConfidenceTable};

pub const DEFAULT_GAP_THRESHOLD: f64 = 0.7;
pub const DEFAULT_COMMIT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_MIN_DISTINCT_USERS: usize = 3;
/// Cells at or above this confidence are known well enough to serve as probes.
pub const DEFAULT_PROBE_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("malformed knowledge base document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid knowledge base: {field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("unknown cell {0}")]
    UnknownTarget(CellRef),
    #[error("empty confidence table for {0}")]
    EmptyTable(CellRef),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> KbError {
    KbError::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

/// The kind of answer a column holds. Drives answer normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SlotType {
    Date,
    Number,
    Text,
    Organization,
}

impl SlotType {
    pub fn as_str(self) -> &'static str {
        match self {
            SlotType::Date => "DATE",
            SlotType::Number => "NUMBER",
            SlotType::Text => "TEXT",
            SlotType::Organization => "ORGANIZATION",
        }
    }
}

impl fmt::Display for SlotType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub slot_type: SlotType,
    /// 1 is the hardest column to answer, 0 the easiest. A correct probe
    /// answer on this column adds exactly this much to the player's accuracy.
    pub difficulty: f64,
    /// Priority rank for gap selection; 0 is the most important.
    pub importance: u32,
}

/// One player's contribution to a cell's candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub answer: String,
    pub user_id: String,
    /// Accuracy score of the user when the answer was given.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(default)]
    pub value: Option<String>,
    #[serde(default)]
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub ground_truth: bool,
    #[serde(default)]
    pub candidates: Vec<Candidate>,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl Cell {
    pub fn distinct_users(&self) -> usize {
        self.candidates
            .iter()
            .map(|c| c.user_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// The pool as answer records, oldest first. A user who answered the
    /// same cell more than once is represented by every answer; confidence
    /// fusion keeps only the latest.
    pub fn pool_records(&self, target: &CellRef) -> Vec<AnswerRecord> {
        self.candidates
            .iter()
            .enumerate()
            .map(|(i, c)| AnswerRecord {
                user_id: c.user_id.clone(),
                query_id: target.to_string(),
                raw_answer: c.answer.clone(),
                normalized_answer: c.answer.clone(),
                accuracy_at_answer: c.accuracy,
                skipped: false,
                timestamp: i as u64,
            })
            .collect()
    }

    pub fn is_probe_eligible(&self, probe_confidence: f64) -> bool {
        self.value.is_some() && (self.ground_truth || self.confidence >= probe_confidence)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: String,
    pub entity_name: String,
    pub category: String,
    #[serde(default)]
    pub cells: BTreeMap<String, Cell>,
}

/// Address of one cell. Orders by row id, then column name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellRef {
    pub row: String,
    pub column: String,
}

impl CellRef {
    pub fn new(row: impl Into<String>, column: impl Into<String>) -> Self {
        Self {
            row: row.into(),
            column: column.into(),
        }
    }
}

impl fmt::Display for CellRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.row, self.column)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommitOutcome {
    Committed { value: String, confidence: f64 },
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommitPolicy {
    pub threshold: f64,
    pub min_distinct_users: usize,
}

impl Default for CommitPolicy {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_COMMIT_THRESHOLD,
            min_distinct_users: DEFAULT_MIN_DISTINCT_USERS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub categories: BTreeSet<String>,
    pub columns: Vec<ColumnMeta>,
    #[serde(default)]
    pub templates: Vec<QueryTemplate>,
    #[serde(default)]
    pub rows: Vec<Row>,
}

impl KnowledgeBase {
    pub fn load<R: Read>(source: R) -> Result<Self, KbError> {
        let mut kb: KnowledgeBase = serde_json::from_reader(source)?;
        kb.rows.sort_by(|a, b| a.id.cmp(&b.id));
        kb.validate()?;
        Ok(kb)
    }

    pub fn from_json_str(s: &str) -> Result<Self, KbError> {
        Self::load(s.as_bytes())
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let file = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(file))
    }

    pub fn save<W: Write>(&self, mut sink: W) -> Result<(), KbError> {
        let mut sorted = self.clone();
        sorted.rows.sort_by(|a, b| a.id.cmp(&b.id));
        serde_json::to_writer_pretty(&mut sink, &sorted)?;
        sink.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Writes to a sibling temp file and renames it over `path`.
    pub fn save_path(&self, path: impl AsRef<Path>) -> Result<(), KbError> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        {
            let file = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(file);
            self.save(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), KbError> {
        let mut names = HashSet::new();
        for (i, col) in self.columns.iter().enumerate() {
            if col.name.is_empty() {
                return Err(invalid(format!("columns[{i}].name"), "empty column name"));
            }
            if !names.insert(col.name.as_str()) {
                return Err(invalid(
                    format!("columns[{i}].name"),
                    format!("duplicate column `{}`", col.name),
                ));
            }
            if !(0.0..=1.0).contains(&col.difficulty) {
                return Err(invalid(
                    format!("columns[{i}].difficulty"),
                    format!("{} is outside [0, 1]", col.difficulty),
                ));
            }
        }
        for (i, t) in self.templates.iter().enumerate() {
            if !names.contains(t.target_column.as_str()) {
                return Err(invalid(
                    format!("templates[{i}].column"),
                    format!("unknown column `{}`", t.target_column),
                ));
            }
            t.validate()
                .map_err(|e| invalid(format!("templates[{i}].pattern"), e.to_string()))?;
        }
        let mut ids = HashSet::new();
        for row in &self.rows {
            if !ids.insert(row.id.as_str()) {
                return Err(invalid(format!("rows[{}].id", row.id), "duplicate row id"));
            }
            if !self.categories.contains(&row.category) {
                return Err(invalid(
                    format!("rows[{}].category", row.id),
                    format!("unknown category `{}`", row.category),
                ));
            }
            for (name, cell) in &row.cells {
                let field = format!("rows[{}].cells.{name}", row.id);
                if !names.contains(name.as_str()) {
                    return Err(invalid(field, "unknown column"));
                }
                if !(0.0..=1.0).contains(&cell.confidence) {
                    return Err(invalid(
                        format!("{field}.confidence"),
                        format!("{} is outside [0, 1]", cell.confidence),
                    ));
                }
                if cell.value.is_some() && cell.confidence <= 0.0 {
                    return Err(invalid(
                        format!("{field}.confidence"),
                        "a present value needs positive confidence",
                    ));
                }
                if cell.ground_truth && cell.value.is_none() {
                    return Err(invalid(
                        format!("{field}.ground_truth"),
                        "ground truth cell has no value",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&ColumnMeta> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn row(&self, id: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn cell(&self, target: &CellRef) -> Option<&Cell> {
        self.row(&target.row)?.cells.get(&target.column)
    }

    pub fn has_category(&self, category: &str) -> bool {
        self.categories.contains(category)
    }

    fn rows_in<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows.iter().filter(move |r| r.category == category)
    }

    fn sorted_column_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names
    }

    /// Cells in `category` that are absent, have no value, or sit below
    /// `conf_threshold`, ordered by row id then column name.
    pub fn find_gaps(&self, category: &str, conf_threshold: f64) -> Result<Vec<CellRef>, KbError> {
        if !self.has_category(category) {
            return Err(KbError::UnknownCategory(category.to_string()));
        }
        let columns = self.sorted_column_names();
        let mut gaps = Vec::new();
        for row in self.rows_in(category) {
            for &col in &columns {
                let is_gap = match row.cells.get(col) {
                    None => true,
                    Some(cell) => cell.value.is_none() || cell.confidence < conf_threshold,
                };
                if is_gap {
                    gaps.push(CellRef::new(row.id.clone(), col));
                }
            }
        }
        gaps.sort();
        Ok(gaps)
    }

    /// Cells in `category` whose value is known well enough to grade a
    /// player's answer, in (row id, column name) order.
    pub fn probe_cells(&self, category: &str, probe_confidence: f64) -> Result<Vec<CellRef>, KbError> {
        if !self.has_category(category) {
            return Err(KbError::UnknownCategory(category.to_string()));
        }
        let mut probes: Vec<CellRef> = self
            .rows_in(category)
            .flat_map(|row| {
                row.cells
                    .iter()
                    .filter(|(_, cell)| cell.is_probe_eligible(probe_confidence))
                    .map(|(col, _)| CellRef::new(row.id.clone(), col.clone()))
            })
            .collect();
        probes.sort();
        Ok(probes)
    }

    fn cell_mut(&mut self, target: &CellRef) -> Result<&mut Cell, KbError> {
        if self.column(&target.column).is_none() {
            return Err(KbError::UnknownTarget(target.clone()));
        }
        let row = self
            .rows
            .iter_mut()
            .find(|r| r.id == target.row)
            .ok_or_else(|| KbError::UnknownTarget(target.clone()))?;
        Ok(row.cells.entry(target.column.clone()).or_default())
    }

    /// Appends candidates to the target cell's pool, creating the cell if
    /// it was missing.
    pub fn append_candidates(
        &mut self,
        target: &CellRef,
        candidates: impl IntoIterator<Item = Candidate>,
    ) -> Result<(), KbError> {
        self.cell_mut(target)?.candidates.extend(candidates);
        Ok(())
    }

    /// Writes the top answer of `table` into the target cell when it is
    /// confident enough and the cell's pool spans enough distinct users.
    /// Candidates are always retained.
    pub fn commit_answers(
        &mut self,
        target: &CellRef,
        table: &ConfidenceTable,
        policy: CommitPolicy,
    ) -> Result<CommitOutcome, KbError> {
        let cell = self.cell_mut(target)?;
        let Some(top) = table.top() else {
            return Err(KbError::EmptyTable(target.clone()));
        };
        if top.confidence >= policy.threshold && cell.distinct_users() >= policy.min_distinct_users {
            cell.value = Some(top.answer.clone());
            cell.confidence = top.confidence;
            Ok(CommitOutcome::Committed {
                value: top.answer.clone(),
                confidence: top.confidence,
            })
        } else {
            Ok(CommitOutcome::Deferred)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ConfidenceEntry;

    fn table(entries: &[(&str, f64, usize)]) -> ConfidenceTable {
        ConfidenceTable {
            entries: entries
                .iter()
                .map(|&(a, c, n)| ConfidenceEntry {
                    answer: a.to_string(),
                    confidence: c,
                    respondents: n,
                })
                .collect(),
            total_respondents: entries.iter().map(|e| e.2).sum(),
            low_trust: false,
        }
    }

    const PEOPLE: &str = r#"{
      "categories": ["faculty"],
      "columns": [
        {"name": "rank", "slot_type": "TEXT", "difficulty": 0.2, "importance": 0},
        {"name": "school", "slot_type": "ORGANIZATION", "difficulty": 0.6, "importance": 1},
        {"name": "joined", "slot_type": "DATE", "difficulty": 0.4, "importance": 1}
      ],
      "templates": [
        {"pattern": "What is the {Column Name} of {Entity Name}?", "column": "rank", "answer_slot": "TEXT"},
        {"pattern": "When did {Entity Name} join the {Column Name} {Column Value}?", "column": "joined", "answer_slot": "DATE"}
      ],
      "rows": [
        {"id": "r2", "entity_name": "Javier Lopez", "category": "faculty", "cells": {
          "rank": {"value": "full", "confidence": 0.9, "candidates": []},
          "school": {"value": "mit", "confidence": 0.6, "candidates": []}
        }},
        {"id": "r1", "entity_name": "Dana Whitfield", "category": "faculty", "cells": {
          "rank": {"value": null, "confidence": 0.0, "candidates": []},
          "school": {"value": "cmu", "confidence": 1.0, "ground_truth": true, "candidates": []},
          "joined": {"value": "2013", "confidence": 1.0, "candidates": []}
        }}
      ]
    }"#;

    fn people() -> KnowledgeBase {
        KnowledgeBase::from_json_str(PEOPLE).unwrap()
    }

    #[test]
    fn empty_rows_load() {
        let kb = KnowledgeBase::from_json_str(
            r#"{"categories": [], "columns": [{"name": "a", "slot_type": "TEXT", "difficulty": 0.5, "importance": 0}], "templates": [], "rows": []}"#,
        )
        .unwrap();
        assert!(kb.rows.is_empty());
        assert_eq!(kb.columns.len(), 1);
    }

    #[test]
    fn people_fixture_round_trips() {
        let kb = people();
        assert_eq!(kb.rows[0].entity_name, "Dana Whitfield");
        assert_eq!(kb.rows[0].cells["school"].value.as_deref(), Some("cmu"));
        let text = kb.to_json_string();
        let again = KnowledgeBase::from_json_str(&text).unwrap();
        assert_eq!(kb, again);
        assert_eq!(text, again.to_json_string());
    }

    #[test]
    fn save_writes_keys_in_schema_order() {
        let text = people().to_json_string();
        let pos = |k: &str| text.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("categories") < pos("columns"));
        assert!(pos("columns") < pos("templates"));
        assert!(pos("templates") < pos("rows"));
        assert!(text.find("\"r1\"").unwrap() < text.find("\"r2\"").unwrap());
    }

    #[test]
    fn unknown_column_in_row_is_rejected() {
        let doc = PEOPLE.replace("\"joined\": {\"value\"", "\"nickname\": {\"value\"");
        let err = KnowledgeBase::from_json_str(&doc).unwrap_err();
        assert!(matches!(err, KbError::Validation { ref field, .. } if field.contains("nickname")), "{err}");
    }

    #[test]
    fn difficulty_out_of_range_is_rejected() {
        let doc = PEOPLE.replace("\"difficulty\": 0.6", "\"difficulty\": 1.5");
        let err = KnowledgeBase::from_json_str(&doc).unwrap_err();
        assert!(err.to_string().contains("columns[1].difficulty"), "{err}");
    }

    #[test]
    fn parse_error_names_missing_field() {
        let doc = PEOPLE.replace("\"slot_type\": \"TEXT\", ", "");
        let err = KnowledgeBase::from_json_str(&doc).unwrap_err();
        assert!(matches!(err, KbError::Parse(_)));
        assert!(err.to_string().contains("slot_type"), "{err}");
    }

    #[test]
    fn unknown_row_category_is_rejected() {
        let doc = PEOPLE.replace("\"category\": \"faculty\", \"cells\": {\n          \"rank\": {\"value\": \"full\"", "\"category\": \"staff\", \"cells\": {\n          \"rank\": {\"value\": \"full\"");
        assert!(KnowledgeBase::from_json_str(&doc).is_err());
    }

    #[test]
    fn no_gaps_when_fully_confident() {
        let mut kb = people();
        for row in &mut kb.rows {
            for col in ["rank", "school", "joined"] {
                row.cells.insert(
                    col.into(),
                    Cell {
                        value: Some("x".into()),
                        confidence: 1.0,
                        ..Cell::default()
                    },
                );
            }
        }
        assert!(kb.find_gaps("faculty", 0.7).unwrap().is_empty());
    }

    #[test]
    fn gaps_by_hand() {
        // r1: joined 1.0, rank null, school 1.0
        // r2: joined missing, rank 0.9, school 0.6
        let gaps = people().find_gaps("faculty", 0.7).unwrap();
        assert_eq!(
            gaps,
            vec![
                CellRef::new("r1", "rank"),
                CellRef::new("r2", "joined"),
                CellRef::new("r2", "school"),
            ]
        );
        let none_below_zero = people().find_gaps("faculty", 0.0).unwrap();
        assert_eq!(none_below_zero, vec![CellRef::new("r1", "rank"), CellRef::new("r2", "joined")]);
    }

    #[test]
    fn gaps_unknown_category() {
        assert!(matches!(people().find_gaps("nope", 0.7), Err(KbError::UnknownCategory(_))));
    }

    #[test]
    fn probe_cells_follow_flag_or_confidence() {
        let probes = people().probe_cells("faculty", DEFAULT_PROBE_CONFIDENCE).unwrap();
        assert_eq!(probes, vec![CellRef::new("r1", "joined"), CellRef::new("r1", "school")]);
    }

    fn add_users(kb: &mut KnowledgeBase, target: &CellRef, answers: &[&str]) {
        let cands = answers.iter().enumerate().map(|(i, a)| Candidate {
            answer: a.to_string(),
            user_id: format!("u{i}"),
            accuracy: 0.5,
        });
        kb.append_candidates(target, cands).unwrap();
    }

    #[test]
    fn commit_deferred_below_threshold() {
        let mut kb = people();
        let target = CellRef::new("r1", "rank");
        add_users(&mut kb, &target, &["associate", "associate", "full", "full", "full"]);
        let out = kb
            .commit_answers(&target, &table(&[("full", 0.6, 3), ("associate", 0.4, 2)]), CommitPolicy {
                threshold: 0.7,
                min_distinct_users: 3,
            })
            .unwrap();
        assert_eq!(out, CommitOutcome::Deferred);
        let cell = kb.cell(&target).unwrap();
        assert_eq!(cell.value, None);
        assert_eq!(cell.candidates.len(), 5);
    }

    #[test]
    fn commit_unanimous() {
        let mut kb = people();
        let target = CellRef::new("r2", "joined");
        add_users(&mut kb, &target, &["2013", "2013", "2013"]);
        let out = kb
            .commit_answers(&target, &table(&[("2013", 1.0, 3)]), CommitPolicy::default())
            .unwrap();
        assert_eq!(
            out,
            CommitOutcome::Committed {
                value: "2013".into(),
                confidence: 1.0
            }
        );
        assert!(!kb.find_gaps("faculty", 1.0).unwrap().contains(&target));
    }

    #[test]
    fn commit_needs_enough_users() {
        // 0.75 >= 0.7 passes, but only 2 distinct users < 3.
        let mut kb = people();
        let target = CellRef::new("r2", "joined");
        add_users(&mut kb, &target, &["a", "b"]);
        let out = kb
            .commit_answers(&target, &table(&[("a", 0.75, 1), ("b", 0.25, 1)]), CommitPolicy {
                threshold: 0.7,
                min_distinct_users: 3,
            })
            .unwrap();
        assert_eq!(out, CommitOutcome::Deferred);
    }

    #[test]
    fn commit_unknown_target() {
        let mut kb = people();
        let err = kb
            .commit_answers(&CellRef::new("r9", "rank"), &table(&[("a", 1.0, 1)]), CommitPolicy::default())
            .unwrap_err();
        assert!(matches!(err, KbError::UnknownTarget(_)));
        let err = kb
            .commit_answers(&CellRef::new("r1", "nope"), &table(&[("a", 1.0, 1)]), CommitPolicy::default())
            .unwrap_err();
        assert!(matches!(err, KbError::UnknownTarget(_)));
    }
}
