//! User registry: interests, cumulative accuracy, lifetime points, badges.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{update_accuracy, UserAccuracy};
use crate::Timestamp;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("user `{0}` already exists")]
    Duplicate(String),
    #[error("unknown interest category `{0}`")]
    UnknownCategory(String),
    #[error("no known words in the interest phrases; please describe your interests again")]
    NoKnownWords,
    #[error("embedding table: {0}")]
    Embedding(String),
    #[error("malformed profile store: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub display_name: String,
    pub interests: Vec<String>,
    pub accuracy: UserAccuracy,
    pub lifetime_points: f64,
    pub badges: Vec<String>,
    pub created_at: Timestamp,
}

impl UserProfile {
    pub fn new(user_id: impl Into<String>, display_name: impl Into<String>, created_at: Timestamp) -> Self {
        let user_id = user_id.into();
        Self {
            accuracy: UserAccuracy::new(user_id.clone()),
            user_id,
            display_name: display_name.into(),
            interests: Vec::new(),
            lifetime_points: 0.0,
            badges: Vec::new(),
            created_at,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StoreDoc {
    users: Vec<UserProfile>,
}

/// All known users, keyed by id. Mutated by one writer at a time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileStore {
    users: BTreeMap<String, UserProfile>,
}

impl ProfileStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load<R: Read>(source: R) -> Result<Self, ProfileError> {
        let doc: StoreDoc = serde_json::from_reader(source)?;
        let mut users = BTreeMap::new();
        for mut p in doc.users {
            p.accuracy.user_id = p.user_id.clone();
            let id = p.user_id.clone();
            if users.insert(id.clone(), p).is_some() {
                return Err(ProfileError::Duplicate(id));
            }
        }
        Ok(Self { users })
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        Self::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Loads `path`, or starts empty if it does not exist yet.
    pub fn load_or_default(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        match std::fs::File::open(path) {
            Ok(f) => Self::load(std::io::BufReader::new(f)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save<W: Write>(&self, mut sink: W) -> Result<(), ProfileError> {
        let doc = StoreDoc {
            users: self.users.values().cloned().collect(),
        };
        serde_json::to_writer_pretty(&mut sink, &doc)?;
        sink.write_all(b"\n")?;
        Ok(())
    }

    pub fn save_path(&self, path: impl AsRef<Path>) -> Result<(), ProfileError> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.save(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn get(&self, user_id: &str) -> Option<&UserProfile> {
        self.users.get(user_id)
    }

    pub fn users(&self) -> impl Iterator<Item = &UserProfile> {
        self.users.values()
    }

    fn get_mut(&mut self, user_id: &str) -> Result<&mut UserProfile, ProfileError> {
        self.users
            .get_mut(user_id)
            .ok_or_else(|| ProfileError::UnknownUser(user_id.to_string()))
    }

    pub fn register(&mut self, profile: UserProfile) -> Result<(), ProfileError> {
        if self.users.contains_key(&profile.user_id) {
            return Err(ProfileError::Duplicate(profile.user_id));
        }
        self.users.insert(profile.user_id.clone(), profile);
        Ok(())
    }

    /// Returns the existing profile or creates one.
    pub fn ensure(&mut self, user_id: &str, display_name: Option<&str>, now: Timestamp) -> &UserProfile {
        self.users
            .entry(user_id.to_string())
            .or_insert_with(|| UserProfile::new(user_id, display_name.unwrap_or(user_id), now))
    }

    pub fn set_interests(
        &mut self,
        user_id: &str,
        interests: Vec<String>,
        categories: &BTreeSet<String>,
    ) -> Result<(), ProfileError> {
        if let Some(bad) = interests.iter().find(|c| !categories.contains(*c)) {
            return Err(ProfileError::UnknownCategory(bad.clone()));
        }
        self.get_mut(user_id)?.interests = interests;
        Ok(())
    }

    pub fn record_probe(&mut self, user_id: &str, correct: bool, difficulty: f64) -> Result<&UserAccuracy, ProfileError> {
        let profile = self.get_mut(user_id)?;
        profile.accuracy = update_accuracy(profile.accuracy.clone(), correct, difficulty);
        Ok(&profile.accuracy)
    }

    pub fn add_points(&mut self, user_id: &str, points: f64) -> Result<(), ProfileError> {
        debug_assert!(points >= 0.0);
        self.get_mut(user_id)?.lifetime_points += points.max(0.0);
        Ok(())
    }

    pub fn award_badges(&mut self, user_id: &str, rules: &[BadgeRule]) -> Result<Vec<String>, ProfileError> {
        Ok(award_badges(self.get_mut(user_id)?, rules))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Milestone {
    LifetimePoints(f64),
    ProbesCorrect(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadgeRule {
    pub id: String,
    pub name: String,
    pub milestone: Milestone,
}

impl BadgeRule {
    fn new(id: &str, name: &str, milestone: Milestone) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            milestone,
        }
    }

    pub fn is_met(&self, profile: &UserProfile) -> bool {
        match self.milestone {
            Milestone::LifetimePoints(p) => profile.lifetime_points >= p,
            Milestone::ProbesCorrect(n) => profile.accuracy.probes_correct >= n,
        }
    }
}

pub fn default_badge_rules() -> Vec<BadgeRule> {
    vec![
        BadgeRule::new("bronze", "Bronze Curator: 10 points earned", Milestone::LifetimePoints(10.0)),
        BadgeRule::new("silver", "Silver Curator: 50 points earned", Milestone::LifetimePoints(50.0)),
        BadgeRule::new("gold", "Gold Curator: 100 points earned", Milestone::LifetimePoints(100.0)),
        BadgeRule::new("scout", "Scout: 10 known answers confirmed", Milestone::ProbesCorrect(10)),
        BadgeRule::new("scholar", "Scholar: 50 known answers confirmed", Milestone::ProbesCorrect(50)),
    ]
}

/// Awards every met rule the profile does not hold yet, in rule order.
pub fn award_badges(profile: &mut UserProfile, rules: &[BadgeRule]) -> Vec<String> {
    let mut fresh = Vec::new();
    for rule in rules {
        if rule.is_met(profile) && !profile.badges.contains(&rule.id) {
            profile.badges.push(rule.id.clone());
            fresh.push(rule.id.clone());
        }
    }
    fresh
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadgeDescription {
    pub id: String,
    pub name: String,
}

/// Held badges in award order. Badges with no matching rule are listed by id.
pub fn list_badges(profile: &UserProfile, rules: &[BadgeRule]) -> Vec<BadgeDescription> {
    profile
        .badges
        .iter()
        .map(|id| BadgeDescription {
            id: id.clone(),
            name: rules
                .iter()
                .find(|r| &r.id == id)
                .map_or_else(|| id.clone(), |r| r.name.clone()),
        })
        .collect()
}

/// Word vectors and per-category centroids of one shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    words: BTreeMap<String, Vec<f64>>,
    centroids: BTreeMap<String, Vec<f64>>,
}

fn parse_vectors<R: BufRead>(source: R, dim: &mut Option<usize>) -> Result<BTreeMap<String, Vec<f64>>, ProfileError> {
    let mut out = BTreeMap::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        if token.starts_with('#') {
            continue;
        }
        let vec = fields
            .map(str::parse::<f64>)
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| ProfileError::Embedding(format!("line {}: {e}", lineno + 1)))?;
        match *dim {
            None => *dim = Some(vec.len()),
            Some(d) if d != vec.len() => {
                return Err(ProfileError::Embedding(format!(
                    "line {}: expected {d} components, found {}",
                    lineno + 1,
                    vec.len()
                )))
            }
            _ => {}
        }
        out.insert(token.to_lowercase(), vec);
    }
    Ok(out)
}

impl EmbeddingTable {
    pub fn new(words: BTreeMap<String, Vec<f64>>, centroids: BTreeMap<String, Vec<f64>>) -> Result<Self, ProfileError> {
        let dim = centroids
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| ProfileError::Embedding("no category centroids".into()))?;
        if dim == 0 {
            return Err(ProfileError::Embedding("zero-dimensional vectors".into()));
        }
        if let Some((k, _)) = words.iter().chain(&centroids).find(|(_, v)| v.len() != dim) {
            return Err(ProfileError::Embedding(format!("`{k}` does not have dimension {dim}")));
        }
        let words = words.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect();
        Ok(Self { dim, words, centroids })
    }

    /// Reads a word file and a centroid file, each holding one
    /// `token v1 v2 ... vd` record per line.
    pub fn from_readers<W: BufRead, C: BufRead>(words: W, centroids: C) -> Result<Self, ProfileError> {
        let mut dim = None;
        let words = parse_vectors(words, &mut dim)?;
        let centroids = parse_vectors(centroids, &mut dim)?;
        Self::new(words, centroids)
    }

    pub fn from_paths(words: impl AsRef<Path>, centroids: impl AsRef<Path>) -> Result<Self, ProfileError> {
        let open = |p: &Path| std::fs::File::open(p).map(std::io::BufReader::new);
        Self::from_readers(open(words.as_ref())?, open(centroids.as_ref())?)
    }

    /// A one-hot table where each category's own name tokens point at it.
    /// Used when no trained embedding is configured.
    pub fn from_categories(categories: &BTreeSet<String>) -> Self {
        let dim = categories.len().max(1);
        let mut words = BTreeMap::new();
        let mut centroids = BTreeMap::new();
        for (i, cat) in categories.iter().enumerate() {
            let mut v = vec![0.0; dim];
            v[i] = 1.0;
            for tok in cat.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
                words.insert(tok.to_lowercase(), v.clone());
            }
            centroids.insert(cat.clone(), v);
        }
        if centroids.is_empty() {
            centroids.insert(String::new(), vec![0.0]);
        }
        Self { dim, words, centroids }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.centroids.keys().map(String::as_str)
    }
}

/// Averages the embeddings of every known word across `phrases` and
/// returns the `k` categories with the nearest centroids, nearest first.
/// Equal distances are ordered by category id.
pub fn classify_interests(phrases: &[String], table: &EmbeddingTable, k: usize) -> Result<Vec<String>, ProfileError> {
    let mut words: Vec<String> = phrases
        .iter()
        .flat_map(|p| p.split(|c: char| !c.is_alphanumeric() && c != '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| table.words.contains_key(w))
        .collect();
    if words.is_empty() {
        return Err(ProfileError::NoKnownWords);
    }
    // Summation order fixed so that the mean is independent of word order.
    words.sort_unstable();
    let mut mean = vec![0.0; table.dim];
    for w in &words {
        for (m, x) in mean.iter_mut().zip(&table.words[w]) {
            *m += x;
        }
    }
    let n = words.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);

    let mut ranked: Vec<(f64, &String)> = table
        .centroids
        .iter()
        .map(|(cat, c)| {
            let d2: f64 = c.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2.sqrt(), cat)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(ranked.into_iter().take(k.max(1)).map(|(_, c)| c.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_table() -> EmbeddingTable {
        let words = BTreeMap::from([
            ("neural".to_string(), vec![1.0, 0.0]),
            ("sql".to_string(), vec![-1.0, 0.0]),
            ("left".to_string(), vec![-1.0, 1.0]),
            ("right".to_string(), vec![1.0, 1.0]),
        ]);
        let centroids = BTreeMap::from([
            ("artificial-intelligence".to_string(), vec![1.0, 0.0]),
            ("databases".to_string(), vec![-1.0, 0.0]),
            ("information-retrieval".to_string(), vec![0.0, 5.0]),
        ]);
        EmbeddingTable::new(words, centroids).unwrap()
    }

    #[test]
    fn word_on_centroid_ranks_first() {
        let got = classify_interests(&["Neural".to_string()], &toy_table(), 1).unwrap();
        assert_eq!(got, vec!["artificial-intelligence"]);
    }

    #[test]
    fn symmetric_words_tie_by_id() {
        // mean of (-1,1) and (1,1) is (0,1): distance sqrt(2) to both
        // (1,0) and (-1,0), and 4 to (0,5).
        let got = classify_interests(&["right and left".to_string()], &toy_table(), 2).unwrap();
        assert_eq!(got, vec!["artificial-intelligence", "databases"]);
        let got = classify_interests(&["left right".to_string()], &toy_table(), 3).unwrap();
        assert_eq!(got[2], "information-retrieval");
    }

    #[test]
    fn unknown_words_error() {
        let err = classify_interests(&["knitting".to_string()], &toy_table(), 1).unwrap_err();
        assert!(matches!(err, ProfileError::NoKnownWords));
    }

    #[test]
    fn reads_vector_files() {
        let words = "neural 1 0\n# comment\nsql -1 0\n";
        let cents = "ai 1 0\ndb -1 0\n";
        let t = EmbeddingTable::from_readers(words.as_bytes(), cents.as_bytes()).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(classify_interests(&["sql".into()], &t, 1).unwrap(), vec!["db"]);
        let bad = EmbeddingTable::from_readers("a 1 2 3\n".as_bytes(), cents.as_bytes());
        assert!(bad.is_err());
    }

    #[test]
    fn category_fallback_table() {
        let cats = BTreeSet::from(["databases".to_string(), "information-retrieval".to_string()]);
        let t = EmbeddingTable::from_categories(&cats);
        let got = classify_interests(&["I like retrieval".into()], &t, 1).unwrap();
        assert_eq!(got, vec!["information-retrieval"]);
    }

    #[test]
    fn badges_walk_rules() {
        let rules = default_badge_rules();
        let mut p = UserProfile::new("u", "U", 0);
        assert!(award_badges(&mut p, &rules).is_empty());
        p.lifetime_points = 55.0;
        assert_eq!(award_badges(&mut p, &rules), vec!["bronze", "silver"]);
        assert!(award_badges(&mut p, &rules).is_empty());
        let listed = list_badges(&p, &rules);
        assert_eq!(listed.len(), 2);
        assert_eq!(listed[0].id, "bronze");
        p.accuracy.probes_correct = 10;
        assert_eq!(award_badges(&mut p, &rules), vec!["scout"]);
        assert_eq!(list_badges(&p, &rules).len(), 3);
        assert!(list_badges(&UserProfile::new("v", "V", 0), &rules).is_empty());
    }

    #[test]
    fn store_round_trip_restores_accuracy_owner() {
        let mut store = ProfileStore::new();
        store.ensure("alice", Some("Alice"), 7);
        store.record_probe("alice", true, 0.25).unwrap();
        store.add_points("alice", 12.0).unwrap();
        store.award_badges("alice", &default_badge_rules()).unwrap();
        let mut buf = Vec::new();
        store.save(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"probes_correct\": 1"));
        assert!(!text.contains("\"user_id\": \"alice\",\n      \"score\""));
        let back = ProfileStore::load(buf.as_slice()).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.get("alice").unwrap().accuracy.user_id, "alice");
    }

    #[test]
    fn interests_must_be_categories() {
        let mut store = ProfileStore::new();
        store.ensure("u", None, 0);
        let cats = BTreeSet::from(["databases".to_string()]);
        assert!(store.set_interests("u", vec!["databases".into()], &cats).is_ok());
        assert!(matches!(
            store.set_interests("u", vec!["cooking".into()], &cats),
            Err(ProfileError::UnknownCategory(_))
        ));
        assert!(matches!(
            store.set_interests("x", vec![], &cats),
            Err(ProfileError::UnknownUser(_))
        ));
    }
}
