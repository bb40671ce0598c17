//! Question generation from knowledge base gaps.
//!
//! A gap query is chosen in stages: the category's gaps are narrowed to
//! those on the most important column (lowest importance rank), and one
//! survivor is drawn uniformly. The chosen cell is then phrased through an
//! intent template such as `What is the {Column Name} of {Entity Name}?`.
//! A configurable fraction of queries are probes instead: questions about
//! cells whose answer is already known, used to grade the players.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{CellRef, ColumnMeta, KbError, KnowledgeBase, Row, SlotType};
use crate::scoring::normalize_lenient;

pub const DEFAULT_PROBE_RATIO: f64 = 0.25;

const ENTITY_NAME: &str = "Entity Name";
const COLUMN_NAME: &str = "Column Name";
const COLUMN_VALUE: &str = "Column Value";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("pattern has no {{Entity Name}} placeholder")]
    MissingEntity,
    #[error("unknown placeholder {{{0}}}")]
    UnknownPlaceholder(String),
    #[error("unbalanced braces in pattern")]
    Unbalanced,
    #[error("placeholder {{{0}}} has no value to substitute")]
    Unresolvable(String),
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("category complete: no gaps to choose from")]
    CategoryComplete,
    #[error("category `{0}` exhausted: no gaps or probes with a usable template")]
    CategoryExhausted(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// An intent: a question pattern for one target column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub pattern: String,
    #[serde(rename = "column")]
    pub target_column: String,
    pub answer_slot: SlotType,
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn parse_pattern(pattern: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let mut pieces = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find(['{', '}']) {
        if rest.as_bytes()[open] == b'}' {
            return Err(TemplateError::Unbalanced);
        }
        let close = rest[open..].find('}').ok_or(TemplateError::Unbalanced)? + open;
        let name = &rest[open + 1..close];
        if name.contains('{') {
            return Err(TemplateError::Unbalanced);
        }
        if open > 0 {
            pieces.push(Piece::Literal(&rest[..open]));
        }
        pieces.push(Piece::Placeholder(name));
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Literal(rest));
    }
    Ok(pieces)
}

impl QueryTemplate {
    pub fn validate(&self) -> Result<(), TemplateError> {
        let pieces = parse_pattern(&self.pattern)?;
        let mut has_entity = false;
        for p in &pieces {
            if let Piece::Placeholder(name) = p {
                match *name {
                    ENTITY_NAME => has_entity = true,
                    COLUMN_NAME | COLUMN_VALUE => {}
                    other => return Err(TemplateError::UnknownPlaceholder(other.to_string())),
                }
            }
        }
        if has_entity {
            Ok(())
        } else {
            Err(TemplateError::MissingEntity)
        }
    }

    pub fn uses_value(&self) -> bool {
        self.pattern.contains("{Column Value}")
    }
}

/// Spoken form of a column name: `date_of_birth` reads as `date of birth`.
pub fn column_display_name(name: &str) -> String {
    name.replace('_', " ")
}

/// Substitutes every placeholder of `template`. `{Column Value}` requires
/// `value`; the result never contains placeholder braces.
pub fn instantiate_template(
    template: &QueryTemplate,
    row: &Row,
    column: &ColumnMeta,
    value: Option<&str>,
) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.pattern.len() + row.entity_name.len());
    for piece in parse_pattern(&template.pattern)? {
        match piece {
            Piece::Literal(s) => out.push_str(s),
            Piece::Placeholder(ENTITY_NAME) => out.push_str(&row.entity_name),
            Piece::Placeholder(COLUMN_NAME) => out.push_str(&column_display_name(&column.name)),
            Piece::Placeholder(COLUMN_VALUE) => {
                out.push_str(value.ok_or_else(|| TemplateError::Unresolvable(COLUMN_VALUE.into()))?)
            }
            Piece::Placeholder(other) => return Err(TemplateError::UnknownPlaceholder(other.into())),
        }
    }
    Ok(out)
}

/// Keeps the gaps on the most important column and draws one uniformly.
///
/// Gaps are sorted first so the draw does not depend on input order.
pub fn select_gap<R: Rng + ?Sized>(
    gaps: &[CellRef],
    columns: &[ColumnMeta],
    rng: &mut R,
) -> Result<CellRef, QueryError> {
    let importance = |g: &CellRef| {
        columns
            .iter()
            .find(|c| c.name == g.column)
            .map_or(u32::MAX, |c| c.importance)
    };
    let best = gaps.iter().map(importance).min().ok_or(QueryError::CategoryComplete)?;
    let mut survivors: Vec<&CellRef> = gaps.iter().filter(|g| importance(g) == best).collect();
    survivors.sort();
    Ok(survivors[rng.gen_range(0..survivors.len())].clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    pub probe_ratio: f64,
    pub gap_threshold: f64,
    pub probe_confidence: f64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            probe_ratio: DEFAULT_PROBE_RATIO,
            gap_threshold: crate::kb::DEFAULT_GAP_THRESHOLD,
            probe_confidence: crate::kb::DEFAULT_PROBE_CONFIDENCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuery {
    pub query_id: String,
    pub question_text: String,
    pub target: CellRef,
    pub answer_slot: SlotType,
    pub difficulty: f64,
    pub is_probe: bool,
    /// Normalized known answer; present exactly when `is_probe`.
    pub expected_answer: Option<String>,
}

fn usable_templates<'a>(
    kb: &'a KnowledgeBase,
    target: &CellRef,
    probe: bool,
) -> Vec<&'a QueryTemplate> {
    let has_value = kb.cell(target).is_some_and(|c| c.value.is_some());
    kb.templates
        .iter()
        .filter(|t| t.target_column == target.column)
        // A probe must not read its own answer aloud.
        .filter(|t| !t.uses_value() || (has_value && !probe))
        .collect()
}

/// Produces the next question for a session in `category`.
///
/// With probability `probe_ratio` a probe is emitted; otherwise a gap query.
/// If the drawn pool is empty the other pool is used.
pub fn generate_query<R: Rng + ?Sized>(
    kb: &KnowledgeBase,
    category: &str,
    config: &QueryConfig,
    rng: &mut R,
    query_id: impl Into<String>,
) -> Result<GeneratedQuery, QueryError> {
    generate_query_avoiding(kb, category, config, rng, query_id, &BTreeSet::new())
}

/// Like [`generate_query`], but cells in `asked` are only chosen once no
/// other gap or probe is left.
pub fn generate_query_avoiding<R: Rng + ?Sized>(
    kb: &KnowledgeBase,
    category: &str,
    config: &QueryConfig,
    rng: &mut R,
    query_id: impl Into<String>,
    asked: &BTreeSet<CellRef>,
) -> Result<GeneratedQuery, QueryError> {
    let mut gaps: Vec<CellRef> = kb
        .find_gaps(category, config.gap_threshold)?
        .into_iter()
        .filter(|g| !usable_templates(kb, g, false).is_empty())
        .collect();
    let mut probes: Vec<CellRef> = kb
        .probe_cells(category, config.probe_confidence)?
        .into_iter()
        .filter(|p| !usable_templates(kb, p, true).is_empty())
        .collect();
    let fresh = |v: &[CellRef]| -> Vec<CellRef> { v.iter().filter(|c| !asked.contains(*c)).cloned().collect() };
    let (fresh_gaps, fresh_probes) = (fresh(&gaps), fresh(&probes));
    if !fresh_gaps.is_empty() || !fresh_probes.is_empty() {
        gaps = fresh_gaps;
        probes = fresh_probes;
    }

    let want_probe = rng.gen_bool(config.probe_ratio.clamp(0.0, 1.0));
    let is_probe = match (want_probe, gaps.is_empty(), probes.is_empty()) {
        (_, true, true) => return Err(QueryError::CategoryExhausted(category.to_string())),
        (true, _, false) | (false, true, false) => true,
        _ => false,
    };

    let target = if is_probe {
        probes[rng.gen_range(0..probes.len())].clone()
    } else {
        select_gap(&gaps, &kb.columns, rng)?
    };
    let templates = usable_templates(kb, &target, is_probe);
    let template = *templates.choose(rng).expect("target filtered to have a template");
    let row = kb.row(&target.row).ok_or_else(|| KbError::UnknownTarget(target.clone()))?;
    let column = kb
        .column(&target.column)
        .ok_or_else(|| KbError::UnknownTarget(target.clone()))?;
    let value = kb.cell(&target).and_then(|c| c.value.as_deref());
    let question_text = instantiate_template(template, row, column, value)?;
    let expected_answer = if is_probe {
        value.map(|v| normalize_lenient(v, template.answer_slot))
    } else {
        None
    };
    Ok(GeneratedQuery {
        query_id: query_id.into(),
        question_text,
        target,
        answer_slot: template.answer_slot,
        difficulty: column.difficulty,
        is_probe,
        expected_answer,
    })
}
