use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kb::{Cell, CellRef, ColumnMeta, KnowledgeBase, Row, SlotType};
use crate::query_gen::QueryTemplate;

use super::{SimError, SimPlayer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub row: String,
    pub column: String,
    pub value: String,
}

/// A knowledge base with gaps, plus the answers the harness keeps hidden
/// from the server.
///
/// File form: `{"kb": <KB document>, "truth": [{"row", "column", "value"}...],
/// "decoys": {"<column>": [text...]}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFixture {
    pub kb: KnowledgeBase,
    #[serde(default)]
    pub truth: Vec<TruthEntry>,
    /// Plausible wrong answers per column.
    #[serde(default)]
    pub decoys: BTreeMap<String, Vec<String>>,
}

impl SimFixture {
    pub fn truth_map(&self) -> HashMap<CellRef, String> {
        self.truth
            .iter()
            .map(|t| (CellRef::new(t.row.clone(), t.column.clone()), t.value.clone()))
            .collect()
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        let mut fixture: SimFixture = serde_json::from_str(&text)?;
        fixture.kb.rows.sort_by(|a, b| a.id.cmp(&b.id));
        fixture
            .kb
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        Ok(fixture)
    }

    pub fn save_path(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RosterDoc {
    players: Vec<SimPlayer>,
}

/// Reads `{"players": [SimPlayer...]}`.
pub fn load_players(path: impl AsRef<Path>) -> Result<Vec<SimPlayer>, SimError> {
    let doc: RosterDoc = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(doc.players)
}

pub fn save_players(players: &[SimPlayer], path: impl AsRef<Path>) -> Result<(), SimError> {
    let doc = RosterDoc {
        players: players.to_vec(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub rows: usize,
    /// Fraction of all cells that start as gaps.
    pub gap_fraction: f64,
    /// Fraction of gaps that hold a low-confidence guess instead of nothing.
    pub low_confidence_share: f64,
    pub categories: Vec<String>,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            rows: 50,
            gap_fraction: 0.4,
            low_confidence_share: 0.25,
            categories: vec!["ai-faculty".into(), "db-faculty".into()],
        }
    }
}

const FIRST: [&str; 10] = [
    "Dana", "Javier", "Monique", "Elena", "Daniel", "Priya", "Tomas", "Aiko", "Grace", "Omar",
];
const LAST: [&str; 10] = [
    "Whitfield", "Lopez", "Nakamura", "Okafor", "Schmidt", "Rossi", "Kowalski", "Haddad", "Lindqvist", "Mbeki",
];

fn vocab(column: &str) -> Vec<String> {
    let words: &[&str] = match column {
        "rank" => &["assistant", "associate", "full", "emeritus", "adjunct", "lecturer"],
        "alma_mater" => &["CMU", "MIT", "Stanford", "Berkeley", "OU", "Georgia Tech", "UW", "Cornell"],
        "h_index" => &["8", "12", "17", "21", "25", "30", "34", "41", "47", "55"],
        _ => &[],
    };
    if column == "join_year" {
        (1995..=2018).map(|y| y.to_string()).collect()
    } else {
        words.iter().map(|w| w.to_string()).collect()
    }
}

/// The handful of wrong answers people actually confuse a value with.
fn decoys(column: &str) -> Vec<String> {
    let words: &[&str] = match column {
        "rank" => &["assistant", "associate", "full"],
        "join_year" => &["2005", "2010", "2015"],
        "alma_mater" => &["CMU", "MIT", "Stanford"],
        "h_index" => &["12", "21", "30"],
        _ => &[],
    };
    words.iter().map(|w| w.to_string()).collect()
}

fn columns() -> Vec<ColumnMeta> {
    let col = |name: &str, slot_type, difficulty, importance| ColumnMeta {
        name: name.into(),
        slot_type,
        difficulty,
        importance,
    };
    vec![
        col("rank", SlotType::Text, 0.2, 0),
        col("join_year", SlotType::Date, 0.4, 1),
        col("alma_mater", SlotType::Organization, 0.6, 1),
        col("h_index", SlotType::Number, 0.9, 2),
    ]
}

fn templates() -> Vec<QueryTemplate> {
    let t = |pattern: &str, column: &str, answer_slot| QueryTemplate {
        pattern: pattern.into(),
        target_column: column.into(),
        answer_slot,
    };
    vec![
        t("What is the {Column Name} of {Entity Name}?", "rank", SlotType::Text),
        t("In what year did {Entity Name} join the faculty?", "join_year", SlotType::Date),
        t("Which university did {Entity Name} graduate from?", "alma_mater", SlotType::Organization),
        t("What is the {Column Name} of {Entity Name}?", "h_index", SlotType::Number),
        t("When did {Entity Name} join the faculty as {Column Value}?", "rank", SlotType::Text),
    ]
}

/// A synthetic people knowledge base: `rows` faculty members, four typed
/// columns, a fixed share of gaps, and the hidden truth for every cell.
/// Known cells are flagged as ground truth so they can serve as probes.
pub fn generate_people_fixture(spec: &FixtureSpec, seed: u64) -> SimFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns = columns();
    let categories: BTreeSet<String> = spec.categories.iter().cloned().collect();
    let cats: Vec<&String> = categories.iter().collect();

    let mut truth = Vec::new();
    let mut rows = Vec::new();
    for i in 0..spec.rows {
        let mut entity = format!("{} {}", FIRST[i % FIRST.len()], LAST[(i / FIRST.len() + i) % LAST.len()]);
        if i >= FIRST.len() * LAST.len() {
            entity.push_str(&format!(" {}", i / (FIRST.len() * LAST.len()) + 1));
        }
        let id = format!("p{i:04}");
        for col in &columns {
            let v = vocab(&col.name);
            truth.push(TruthEntry {
                row: id.clone(),
                column: col.name.clone(),
                value: v[rng.gen_range(0..v.len())].clone(),
            });
        }
        rows.push(Row {
            id,
            entity_name: entity,
            category: cats.get(i % cats.len().max(1)).map(|c| c.to_string()).unwrap_or_default(),
            cells: BTreeMap::new(),
        });
    }

    let total = truth.len();
    let gap_count = ((spec.gap_fraction.clamp(0.0, 1.0)) * total as f64).round() as usize;
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut rng);
    let gaps: BTreeSet<usize> = idx[..gap_count].iter().copied().collect();

    for (k, t) in truth.iter().enumerate() {
        let row = &mut rows[k / columns.len()];
        if gaps.contains(&k) {
            if rng.gen_bool(spec.low_confidence_share.clamp(0.0, 1.0)) {
                let v = vocab(&t.column);
                row.cells.insert(
                    t.column.clone(),
                    Cell {
                        value: Some(v[rng.gen_range(0..v.len())].to_lowercase()),
                        confidence: 0.3,
                        ..Cell::default()
                    },
                );
            }
        } else {
            row.cells.insert(
                t.column.clone(),
                Cell {
                    value: Some(t.value.clone()),
                    confidence: 1.0,
                    ground_truth: true,
                    candidates: Vec::new(),
                },
            );
        }
    }

    let decoys = columns.iter().map(|c| (c.name.clone(), decoys(&c.name))).collect();
    let kb = KnowledgeBase {
        categories,
        columns,
        templates: templates(),
        rows,
    };
    debug_assert!(kb.validate().is_ok());
    SimFixture { kb, truth, decoys }
}

/// `n` players whose reliabilities are spread evenly over
/// `mean - spread ..= mean + spread` (clamped to [0, 1]).
pub fn roster(n: usize, mean: f64, spread: f64) -> Vec<SimPlayer> {
    (0..n)
        .map(|i| {
            let offset = if n > 1 {
                spread * (2.0 * i as f64 / (n - 1) as f64 - 1.0)
            } else {
                0.0
            };
            SimPlayer::new(format!("player{i:02}"), (mean + offset).clamp(0.0, 1.0))
        })
        .collect()
}
