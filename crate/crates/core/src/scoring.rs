//! Answer normalization, probe-driven accuracy, and accuracy-weighted
//! confidence over the distinct answers to one question.
//!
//! Accuracy is cumulative: every correct probe answer adds the column's
//! difficulty to the player's score, an incorrect one adds nothing. The
//! confidence of answer `i` is the accuracy mass of the players who gave
//! it, divided by the accuracy mass of everyone who answered.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::SlotType;
use crate::Timestamp;

/// Starting accuracy for a new user. Zero would give newcomers no voice at
/// all in confidence fusion.
pub const INITIAL_ACCURACY: f64 = 0.5;

/// Confidences closer than this are treated as tied.
const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NormalizeError {
    #[error("empty answer")]
    Empty,
    #[error("`{0}` is not a date")]
    BadDate(String),
    #[error("`{0}` is not a number")]
    BadNumber(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoringError {
    #[error("no non-skipped responses")]
    NoResponses,
    #[error("accuracy weight {weight} for user `{user}` is not a finite non-negative number")]
    InvalidWeight { user: String, weight: f64 },
    #[error("confidence table is empty")]
    EmptyTable,
}

/// Lowercases, trims, and collapses internal whitespace runs to one space.
pub fn fold_text(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Canonical form of an answer so that equal answers compare equal.
///
/// Dates become `YYYY`, `YYYY-MM` or `YYYY-MM-DD`; numbers become minimal
/// decimals (`07.50` -> `7.5`); text and organizations are only folded.
pub fn normalize_answer(raw: &str, slot: SlotType) -> Result<String, NormalizeError> {
    let folded = fold_text(raw);
    if folded.is_empty() {
        return Err(NormalizeError::Empty);
    }
    match slot {
        SlotType::Text | SlotType::Organization => Ok(folded),
        SlotType::Date => normalize_date(&folded).ok_or(NormalizeError::BadDate(folded)),
        SlotType::Number => normalize_number(&folded).ok_or(NormalizeError::BadNumber(folded)),
    }
}

/// Like [`normalize_answer`], but an unparseable date or number falls back
/// to its folded text. Such an answer can never equal a canonical one, so
/// it counts as its own distinct (and non-matching) answer.
pub fn normalize_lenient(raw: &str, slot: SlotType) -> String {
    normalize_answer(raw, slot).unwrap_or_else(|_| fold_text(raw))
}

const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september", "october",
    "november", "december",
];

fn month_from_name(tok: &str) -> Option<u32> {
    let tok = tok.trim_end_matches('.');
    if tok.len() < 3 {
        return None;
    }
    MONTHS
        .iter()
        .position(|m| m.starts_with(tok))
        .map(|i| i as u32 + 1)
}

fn days_in_month(year: u32, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        _ if (year.is_multiple_of(4) && !year.is_multiple_of(100)) || year.is_multiple_of(400) => 29,
        _ => 28,
    }
}

fn parse_year(tok: &str) -> Option<u32> {
    (tok.len() == 4 && tok.bytes().all(|b| b.is_ascii_digit()))
        .then(|| tok.parse().ok())
        .flatten()
}

fn parse_small(tok: &str) -> Option<u32> {
    (!tok.is_empty() && tok.len() <= 2 && tok.bytes().all(|b| b.is_ascii_digit()))
        .then(|| tok.parse().ok())
        .flatten()
}

fn format_date(year: u32, month: Option<u32>, day: Option<u32>) -> Option<String> {
    match (month, day) {
        (None, None) => Some(format!("{year:04}")),
        (Some(m), None) if (1..=12).contains(&m) => Some(format!("{year:04}-{m:02}")),
        (Some(m), Some(d)) if (1..=12).contains(&m) && d >= 1 && d <= days_in_month(year, m) => {
            Some(format!("{year:04}-{m:02}-{d:02}"))
        }
        _ => None,
    }
}

fn normalize_date(folded: &str) -> Option<String> {
    // Numeric forms: 2013, 2013-06, 2013/6/5, 2013.06.05
    if folded.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'-' | b'/' | b'.')) {
        let parts: Vec<&str> = folded.split(['-', '/', '.']).collect();
        let year = parse_year(parts[0])?;
        return match parts.len() {
            1 => format_date(year, None, None),
            2 => format_date(year, Some(parse_small(parts[1])?), None),
            3 => format_date(year, Some(parse_small(parts[1])?), Some(parse_small(parts[2])?)),
            _ => None,
        };
    }
    // Spoken forms: "june 2013", "june 5, 2013", "june 5th 2013", "5 june 2013"
    let cleaned = folded.replace(',', " ");
    let toks: Vec<&str> = cleaned.split_whitespace().collect();
    let day_of = |t: &str| {
        let digits = t.trim_end_matches(|c: char| c.is_ascii_alphabetic());
        let suffix = &t[digits.len()..];
        if matches!(suffix, "" | "st" | "nd" | "rd" | "th") {
            parse_small(digits)
        } else {
            None
        }
    };
    match toks.as_slice() {
        [m, y] => format_date(parse_year(y)?, Some(month_from_name(m)?), None),
        [m, d, y] if month_from_name(m).is_some() => {
            format_date(parse_year(y)?, month_from_name(m), Some(day_of(d)?))
        }
        [d, m, y] => format_date(parse_year(y)?, Some(month_from_name(m)?), Some(day_of(d)?)),
        [d, "of", m, y] => format_date(parse_year(y)?, Some(month_from_name(m)?), Some(day_of(d)?)),
        _ => None,
    }
}

fn normalize_number(folded: &str) -> Option<String> {
    let (negative, body) = match folded.as_bytes().first()? {
        b'-' => (true, &folded[1..]),
        b'+' => (false, &folded[1..]),
        _ => (false, folded),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    // Thousands separators are only allowed in groups of three.
    let int_digits: String = if int_part.contains(',') {
        let groups: Vec<&str> = int_part.split(',').collect();
        let ok = !groups[0].is_empty()
            && groups[0].len() <= 3
            && groups[1..].iter().all(|g| g.len() == 3);
        if !ok {
            return None;
        }
        groups.concat()
    } else {
        int_part.to_string()
    };
    if !int_digits.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let int_trim = int_digits.trim_start_matches('0');
    let frac_trim = frac_part.trim_end_matches('0');
    let int_out = if int_trim.is_empty() { "0" } else { int_trim };
    let mut out = String::new();
    if negative && !(int_out == "0" && frac_trim.is_empty()) {
        out.push('-');
    }
    out.push_str(int_out);
    if !frac_trim.is_empty() {
        out.push('.');
        out.push_str(frac_trim);
    }
    Some(out)
}

/// Cumulative accuracy of one user, built from probe answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAccuracy {
    #[serde(skip)]
    pub user_id: String,
    pub score: f64,
    pub probes_answered: u32,
    pub probes_correct: u32,
}

impl UserAccuracy {
    pub fn new(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            score: INITIAL_ACCURACY,
            probes_answered: 0,
            probes_correct: 0,
        }
    }
}

/// Applies one graded probe answer: a correct answer adds the column
/// difficulty to the score, an incorrect one leaves it unchanged.
pub fn update_accuracy(mut acc: UserAccuracy, correct: bool, column_difficulty: f64) -> UserAccuracy {
    debug_assert!((0.0..=1.0).contains(&column_difficulty));
    acc.probes_answered += 1;
    if correct {
        acc.probes_correct += 1;
        acc.score += column_difficulty;
    }
    acc
}

/// One player's response to one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub user_id: String,
    pub query_id: String,
    pub raw_answer: String,
    /// Empty when skipped.
    pub normalized_answer: String,
    /// The user's accuracy score frozen at the moment of answering.
    pub accuracy_at_answer: f64,
    pub skipped: bool,
    pub timestamp: Timestamp,
}

impl AnswerRecord {
    pub fn answered(
        user_id: impl Into<String>,
        query_id: impl Into<String>,
        raw: &str,
        slot: SlotType,
        accuracy_at_answer: f64,
        timestamp: Timestamp,
    ) -> Self {
        Self {
            user_id: user_id.into(),
            query_id: query_id.into(),
            raw_answer: raw.to_string(),
            normalized_answer: normalize_lenient(raw, slot),
            accuracy_at_answer,
            skipped: false,
            timestamp,
        }
    }

    pub fn skipped(
        user_id: impl Into<String>,
        query_id: impl Into<String>,
        accuracy_at_answer: f64,
        timestamp: Timestamp,
    ) -> Self {
        Self {
            user_id: user_id.into(),
            query_id: query_id.into(),
            raw_answer: String::new(),
            normalized_answer: String::new(),
            accuracy_at_answer,
            skipped: true,
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEntry {
    pub answer: String,
    pub confidence: f64,
    /// Number of users who gave this answer.
    pub respondents: usize,
}

/// Confidence per distinct normalized answer, sorted by answer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTable {
    pub entries: Vec<ConfidenceEntry>,
    pub total_respondents: usize,
    /// Set when every respondent had zero accuracy and the table fell back
    /// to uniform confidence.
    pub low_trust: bool,
}

impl ConfidenceTable {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, answer: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.answer == answer)
            .map(|e| e.confidence)
    }

    /// Highest-confidence entry; ties go to the lexicographically smallest
    /// answer.
    pub fn top(&self) -> Option<&ConfidenceEntry> {
        let mut best: Option<&ConfidenceEntry> = None;
        for e in &self.entries {
            match best {
                Some(b) if e.confidence <= b.confidence + TIE_EPSILON => {}
                _ => best = Some(e),
            }
        }
        best
    }

    pub fn total_confidence(&self) -> f64 {
        self.entries.iter().map(|e| e.confidence).sum()
    }
}

/// Keeps the latest non-skipped record per user, in first-seen user order.
fn latest_per_user(records: &[AnswerRecord]) -> Vec<&AnswerRecord> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut kept: Vec<&AnswerRecord> = Vec::new();
    for r in records.iter().filter(|r| !r.skipped) {
        match index.get(r.user_id.as_str()) {
            Some(&i) => {
                if r.timestamp >= kept[i].timestamp {
                    kept[i] = r;
                }
            }
            None => {
                index.insert(&r.user_id, kept.len());
                kept.push(r);
            }
        }
    }
    kept
}

/// Accuracy-weighted confidence over the distinct answers in `records`.
///
/// Skipped records are ignored and each user counts once (their latest
/// record). If every weight is zero the table is uniform over the distinct
/// answers and flagged `low_trust`.
pub fn compute_confidence(records: &[AnswerRecord]) -> Result<ConfidenceTable, ScoringError> {
    let kept = latest_per_user(records);
    if kept.is_empty() {
        return Err(ScoringError::NoResponses);
    }
    let mut groups: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in &kept {
        let w = r.accuracy_at_answer;
        if !w.is_finite() || w < 0.0 {
            return Err(ScoringError::InvalidWeight {
                user: r.user_id.clone(),
                weight: w,
            });
        }
        let g = groups.entry(r.normalized_answer.as_str()).or_insert((0.0, 0));
        g.0 += w;
        g.1 += 1;
    }
    let total: f64 = groups.values().map(|g| g.0).sum();
    let low_trust = total <= 0.0;
    let distinct = groups.len() as f64;
    let entries = groups
        .into_iter()
        .map(|(answer, (weight, respondents))| ConfidenceEntry {
            answer: answer.to_string(),
            confidence: if low_trust { 1.0 / distinct } else { weight / total },
            respondents,
        })
        .collect();
    Ok(ConfidenceTable {
        entries,
        total_respondents: kept.len(),
        low_trust,
    })
}

/// The most likely answer and every user who gave it.
pub fn resolve_round_winner(
    table: &ConfidenceTable,
    records: &[AnswerRecord],
) -> Result<(String, Vec<String>), ScoringError> {
    let top = table.top().ok_or(ScoringError::EmptyTable)?;
    let winners = latest_per_user(records)
        .into_iter()
        .filter(|r| r.normalized_answer == top.answer)
        .map(|r| r.user_id.clone())
        .collect();
    Ok((top.answer.clone(), winners))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: &str, answer: &str, acc: f64) -> AnswerRecord {
        AnswerRecord::answered(user, "q", answer, SlotType::Text, acc, 0)
    }

    #[test]
    fn text_fold() {
        assert_eq!(normalize_answer("  Full ", SlotType::Text).unwrap(), "full");
        assert_eq!(
            normalize_answer(" Carnegie   Mellon\tUniversity", SlotType::Organization).unwrap(),
            "carnegie mellon university"
        );
        assert_eq!(normalize_answer("   ", SlotType::Text), Err(NormalizeError::Empty));
    }

    #[test]
    fn dates() {
        assert_eq!(normalize_answer("2013", SlotType::Date).unwrap(), "2013");
        assert_eq!(normalize_answer("2013-6", SlotType::Date).unwrap(), "2013-06");
        assert_eq!(normalize_answer("2013/06/05", SlotType::Date).unwrap(), "2013-06-05");
        assert_eq!(normalize_answer("June 5th, 2013", SlotType::Date).unwrap(), "2013-06-05");
        assert_eq!(normalize_answer("5 june 2013", SlotType::Date).unwrap(), "2013-06-05");
        assert_eq!(normalize_answer("the 5 of june 2013", SlotType::Date).ok(), None);
        assert_eq!(normalize_answer("Sept 2013", SlotType::Date).unwrap(), "2013-09");
        assert_eq!(normalize_answer("2012-02-29", SlotType::Date).unwrap(), "2012-02-29");
        assert!(normalize_answer("2013-02-29", SlotType::Date).is_err());
        assert!(normalize_answer("2013-13", SlotType::Date).is_err());
        assert!(normalize_answer("13", SlotType::Date).is_err());
        assert!(normalize_answer("soon", SlotType::Date).is_err());
    }

    #[test]
    fn numbers() {
        // 07.50: strip the leading zero of the integer part, the trailing
        // zero of the fraction.
        assert_eq!(normalize_answer("07.50", SlotType::Number).unwrap(), "7.5");
        assert_eq!(normalize_answer("100", SlotType::Number).unwrap(), "100");
        assert_eq!(normalize_answer("3.000", SlotType::Number).unwrap(), "3");
        assert_eq!(normalize_answer(".5", SlotType::Number).unwrap(), "0.5");
        assert_eq!(normalize_answer("-0.0", SlotType::Number).unwrap(), "0");
        assert_eq!(normalize_answer("+0012", SlotType::Number).unwrap(), "12");
        assert_eq!(normalize_answer("1,250", SlotType::Number).unwrap(), "1250");
        assert!(normalize_answer("1,25", SlotType::Number).is_err());
        assert!(normalize_answer("seven", SlotType::Number).is_err());
        assert!(normalize_answer(".", SlotType::Number).is_err());
        assert!(normalize_answer("1.2.3", SlotType::Number).is_err());
    }

    #[test]
    fn lenient_fallback_never_matches_canonical() {
        assert_eq!(normalize_lenient("Soon-ish", SlotType::Date), "soon-ish");
        assert_eq!(normalize_lenient("2013", SlotType::Date), "2013");
    }

    #[test]
    fn accuracy_updates() {
        let a = UserAccuracy::new("u");
        let up = update_accuracy(a.clone(), true, 0.8);
        assert!((up.score - 1.3).abs() < 1e-12);
        assert_eq!((up.probes_answered, up.probes_correct), (1, 1));
        let down = update_accuracy(a.clone(), false, 0.8);
        assert_eq!(down.score, 0.5);
        assert_eq!((down.probes_answered, down.probes_correct), (1, 0));
        assert_eq!(update_accuracy(a, true, 0.0).score, 0.5);
    }

    #[test]
    fn worked_example() {
        let records = vec![
            rec("u1", "associate", 0.6),
            rec("u2", "associate", 0.8),
            rec("u3", "full", 0.5),
            rec("u4", "full", 0.7),
            rec("u5", "full", 0.9),
        ];
        let t = compute_confidence(&records).unwrap();
        assert!((t.get("associate").unwrap() - 0.4).abs() < 1e-9);
        assert!((t.get("full").unwrap() - 0.6).abs() < 1e-9);
        assert_eq!(t.total_respondents, 5);
        let (winner, users) = resolve_round_winner(&t, &records).unwrap();
        assert_eq!(winner, "full");
        assert_eq!(users, vec!["u3", "u4", "u5"]);
    }

    #[test]
    fn single_respondent() {
        let t = compute_confidence(&[rec("u", "x", 0.3)]).unwrap();
        assert_eq!(t.get("x"), Some(1.0));
    }

    #[test]
    fn equal_weights_are_vote_fractions() {
        let t = compute_confidence(&[rec("a", "a", 0.5), rec("b", "a", 0.5), rec("c", "b", 0.5)]).unwrap();
        assert!((t.get("a").unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.get("b").unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn skips_and_duplicates() {
        let mut late = rec("u1", "b", 0.5);
        late.timestamp = 10;
        let records = vec![
            rec("u1", "a", 0.5),
            AnswerRecord::skipped("u2", "q", 0.9, 0),
            late,
            rec("u3", "a", 0.5),
        ];
        let t = compute_confidence(&records).unwrap();
        assert_eq!(t.total_respondents, 2);
        assert_eq!(t.get("a"), Some(0.5));
        assert_eq!(t.get("b"), Some(0.5));
        assert_eq!(
            compute_confidence(&[AnswerRecord::skipped("u", "q", 0.5, 0)]),
            Err(ScoringError::NoResponses)
        );
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let t = compute_confidence(&[rec("a", "x", 0.0), rec("b", "x", 0.0), rec("c", "y", 0.0)]).unwrap();
        assert!(t.low_trust);
        assert_eq!(t.get("x"), Some(0.5));
        assert_eq!(t.get("y"), Some(0.5));
    }

    #[test]
    fn negative_weight_rejected() {
        assert!(matches!(
            compute_confidence(&[rec("a", "x", -1.0)]),
            Err(ScoringError::InvalidWeight { .. })
        ));
    }

    #[test]
    fn exact_tie_goes_to_smaller_answer() {
        let records = vec![rec("u1", "beta", 0.5), rec("u2", "alpha", 0.5)];
        let t = compute_confidence(&records).unwrap();
        let (winner, users) = resolve_round_winner(&t, &records).unwrap();
        assert_eq!(winner, "alpha");
        assert_eq!(users, vec!["u2"]);
        assert_eq!(
            resolve_round_winner(&ConfidenceTable::default(), &records),
            Err(ScoringError::EmptyTable)
        );
    }
}
