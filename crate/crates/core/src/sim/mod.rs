//! Deterministic simulated players.
//!
//! The harness stands in for a room of voice devices: every simulated
//! player is a protocol client that only sees wire messages. A single
//! virtual clock drives both the server and the clients, so a full game
//! finishes in microseconds and the same configuration and seed always
//! produce the same transcript.
//!
//! The harness also holds the hidden ground truth for every gap, which the
//! server never sees, and uses it to grade what the server committed.

mod fixture;

pub use fixture::{
    generate_people_fixture, load_players, roster, save_players, FixtureSpec, SimFixture, TruthEntry,
};

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kb::{CellRef, SlotType};
use crate::profiles::ProfileStore;
use crate::protocol::{
    decode_server, encode_message, ClientMessage, ConnId, Frame, Outbound, ProtocolError, Server, ServerMessage,
    ServerOptions,
};
use crate::query_gen::instantiate_template;
use crate::scoring::normalize_lenient;
use crate::session::{GameHub, SessionConfig, World};
use crate::Timestamp;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("game {game} did not finish within {limit_ms} ms of virtual time")]
    Stalled { game: u32, limit_ms: u64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Response delay, drawn uniformly from `min_ms..=max_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub min_ms: u64,
    pub max_ms: u64,
}

impl LatencyModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        if self.max_ms <= self.min_ms {
            self.min_ms
        } else {
            rng.gen_range(self.min_ms..=self.max_ms)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPlayer {
    pub user_id: String,
    /// Probability of giving the true answer when answering.
    pub reliability: f64,
    pub latency_ms: LatencyModel,
    pub skip_prob: f64,
    /// Probability of never responding, letting the round time out.
    pub drop_prob: f64,
}

impl SimPlayer {
    pub fn new(user_id: impl Into<String>, reliability: f64) -> Self {
        Self {
            user_id: user_id.into(),
            reliability,
            latency_ms: LatencyModel { min_ms: 200, max_ms: 1500 },
            skip_prob: 0.0,
            drop_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("reliability", self.reliability),
            ("skip_prob", self.skip_prob),
            ("drop_prob", self.drop_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SimError::Config(format!("{}: {name} {v} is outside [0, 1]", self.user_id)));
            }
        }
        if self.user_id.is_empty() {
            return Err(SimError::Config("player with empty user_id".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimAction {
    Answer(String),
    Skip,
    Silence,
}

/// Decides what a player does with one question.
///
/// Silence with probability `drop_prob`; otherwise skip with probability
/// `skip_prob`; otherwise the true answer with probability `reliability`,
/// else a decoy different from the truth.
pub fn simulate_answer<R: Rng + ?Sized>(
    player: &SimPlayer,
    truth: &str,
    decoys: &[String],
    slot: SlotType,
    rng: &mut R,
) -> SimAction {
    if rng.gen_bool(player.drop_prob) {
        return SimAction::Silence;
    }
    if rng.gen_bool(player.skip_prob) {
        return SimAction::Skip;
    }
    if rng.gen_bool(player.reliability) {
        return SimAction::Answer(truth.to_string());
    }
    let truth_norm = normalize_lenient(truth, slot);
    let wrong: Vec<&String> = decoys
        .iter()
        .filter(|d| normalize_lenient(d, slot) != truth_norm)
        .collect();
    match wrong.choose(rng) {
        Some(d) => SimAction::Answer((*d).clone()),
        None => SimAction::Answer(format!("not {truth}")),
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub fixture: SimFixture,
    pub players: Vec<SimPlayer>,
    pub games: u32,
    pub seed: u64,
    pub session: SessionConfig,
    pub players_per_game: usize,
    /// Categories to rotate through; all KB categories when empty.
    pub categories: Vec<String>,
    /// Virtual-time granularity of the driver loop.
    pub step_ms: u64,
}

impl SimConfig {
    /// Compressed timing: 2 s answer window, 0.5 s reveal pause.
    pub fn new(fixture: SimFixture, players: Vec<SimPlayer>, games: u32, seed: u64) -> Self {
        let session = SessionConfig {
            answer_window_ms: 2_000,
            extension_step_ms: 1_000,
            reveal_pause_ms: 500,
            ..SessionConfig::default()
        };
        let players_per_game = players.len().clamp(session.min_players, session.max_players);
        Self {
            fixture,
            players,
            games,
            seed,
            session,
            players_per_game,
            categories: Vec::new(),
            step_ms: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub games_played: u32,
    pub rounds_played: u32,
    /// Cells that were gaps at the start and hold a committed value now.
    pub cells_committed: usize,
    pub cells_committed_correct: usize,
    /// `None` when nothing was committed or no ground truth was supplied.
    pub committed_correct_fraction: Option<f64>,
    /// Accuracy reported to each player after each of their games.
    pub accuracy_trajectories: BTreeMap<String, Vec<f64>>,
    pub protocol_errors: usize,
    pub broadcasts: usize,
    /// SHA-256 over every broadcast line, in delivery order, with recipient.
    pub transcript_digest: String,
    pub virtual_time_ms: Timestamp,
}

/// Order-sensitive hash over (recipient, encoded line) pairs.
#[derive(Debug, Clone, Default)]
pub struct TranscriptDigest {
    hasher: Sha256,
    count: usize,
}

impl TranscriptDigest {
    pub fn update(&mut self, recipient: &str, line: &[u8]) {
        self.hasher.update((recipient.len() as u64).to_le_bytes());
        self.hasher.update(recipient.as_bytes());
        self.hasher.update((line.len() as u64).to_le_bytes());
        self.hasher.update(line);
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

/// Every delivered message, for tests that inspect the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub at: Timestamp,
    pub user_id: String,
    pub frame: Frame<ServerMessage>,
}

struct Client {
    player: SimPlayer,
    conn: ConnId,
    games_finished: u32,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Scheduled {
    at: Timestamp,
    order: u64,
    client: usize,
}

/// A client-side message waiting for its send time.
struct Pending {
    client: usize,
    msg: ClientMessage,
}

struct Driver {
    server: Server,
    clients: Vec<Client>,
    by_conn: HashMap<ConnId, usize>,
    now: Timestamp,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Scheduled>>,
    pending: HashMap<u64, Pending>,
    next_order: u64,
    out_seq: HashMap<usize, u64>,
    digest: TranscriptDigest,
    transcript: Option<Vec<Delivery>>,
    questions: HashMap<String, CellRef>,
    truth: HashMap<CellRef, String>,
    decoys: BTreeMap<String, Vec<String>>,
    trajectories: BTreeMap<String, Vec<f64>>,
    protocol_errors: usize,
    step_ms: u64,
}

impl Driver {
    fn schedule(&mut self, at: Timestamp, client: usize, msg: ClientMessage) {
        let order = self.next_order;
        self.next_order += 1;
        self.pending.insert(order, Pending { client, msg });
        self.queue.push(Reverse(Scheduled { at, order, client }));
    }

    fn send_now(&mut self, client: usize, msg: ClientMessage) -> Result<(), SimError> {
        let seq = self.out_seq.entry(client).or_insert(0);
        *seq += 1;
        let line = encode_message(&Frame::with_seq(*seq, msg))?;
        let conn = self.clients[client].conn;
        let out = self.server.handle_line(conn, &line, self.now);
        self.deliver(out)
    }

    fn deliver(&mut self, actions: Vec<Outbound>) -> Result<(), SimError> {
        for action in actions {
            let Outbound::Send { conn, frame } = action else {
                continue;
            };
            let line = encode_message(&frame)?;
            let frame = decode_server(&line)?;
            let Some(&ci) = self.by_conn.get(&conn) else {
                continue;
            };
            let user = self.clients[ci].player.user_id.clone();
            if frame.body.is_broadcast() {
                self.digest.update(&user, &line);
            }
            if let Some(t) = self.transcript.as_mut() {
                t.push(Delivery {
                    at: self.now,
                    user_id: user.clone(),
                    frame: frame.clone(),
                });
            }
            self.react(ci, frame.body);
        }
        Ok(())
    }

    fn react(&mut self, ci: usize, msg: ServerMessage) {
        match msg {
            ServerMessage::RoundStart {
                session_id,
                question_id,
                question_text,
                answer_slot,
                ..
            } => {
                let player = self.clients[ci].player.clone();
                let target = self.questions.get(&question_text).cloned();
                let truth = target.as_ref().and_then(|t| self.truth.get(t)).cloned();
                let decoys = target
                    .as_ref()
                    .and_then(|t| self.decoys.get(&t.column))
                    .cloned()
                    .unwrap_or_default();
                let action = match truth {
                    Some(truth) => simulate_answer(&player, &truth, &decoys, answer_slot, &mut self.rng),
                    // The harness has no idea; it can only guess.
                    None => match decoys.choose(&mut self.rng) {
                        Some(d) => SimAction::Answer(d.clone()),
                        None => SimAction::Skip,
                    },
                };
                let delay = player.latency_ms.sample(&mut self.rng);
                let msg = match action {
                    SimAction::Silence => return,
                    SimAction::Skip => ClientMessage::Skip {
                        session_id,
                        question_id,
                    },
                    SimAction::Answer(text) => ClientMessage::Answer {
                        session_id,
                        question_id,
                        text: surface_form(&text, answer_slot, &mut self.rng),
                    },
                };
                self.schedule(self.now + delay, ci, msg);
            }
            ServerMessage::GameEnd { .. } => {
                self.clients[ci].games_finished += 1;
                self.schedule(self.now, ci, ClientMessage::ScoreQuery { session_id: None });
            }
            ServerMessage::Score { accuracy, .. } => {
                let user = self.clients[ci].player.user_id.clone();
                self.trajectories.entry(user).or_default().push(accuracy);
            }
            ServerMessage::Ping {} => self.schedule(self.now, ci, ClientMessage::Pong {}),
            ServerMessage::Error { .. } => self.protocol_errors += 1,
            ServerMessage::Reveal { .. } => {}
            _ => {}
        }
    }

    /// Sends every scheduled message due at or before `now`.
    fn flush_due(&mut self) -> Result<(), SimError> {
        while let Some(Reverse(top)) = self.queue.peek() {
            if top.at > self.now {
                break;
            }
            let Reverse(item) = self.queue.pop().expect("peeked");
            let Pending { client, msg } = self.pending.remove(&item.order).expect("scheduled message");
            self.send_now(client, msg)?;
        }
        Ok(())
    }

    fn tick(&mut self) -> Result<(), SimError> {
        let out = self.server.tick(self.now);
        self.deliver(out)
    }

    fn play_game(&mut self, game: u32, category: &str, seats: &[usize]) -> Result<(), SimError> {
        let before: Vec<u32> = seats.iter().map(|&c| self.clients[c].games_finished).collect();
        for &c in seats {
            self.send_now(
                c,
                ClientMessage::JoinGame {
                    category: category.to_string(),
                },
            )?;
        }
        let cfg = self.server.hub().config().clone();
        let limit_ms = u64::from(cfg.rounds_total + 1)
            * (crate::session::RESPONSE_CAP_MS + cfg.reveal_pause_ms + 10 * self.step_ms);
        let started = self.now;
        loop {
            self.flush_due()?;
            self.tick()?;
            self.flush_due()?;
            let done = seats
                .iter()
                .zip(&before)
                .all(|(&c, &b)| self.clients[c].games_finished > b);
            if done && self.queue.is_empty() {
                return Ok(());
            }
            if self.now - started > limit_ms {
                return Err(SimError::Stalled { game, limit_ms });
            }
            let next_step = self.now + self.step_ms;
            self.now = match self.queue.peek() {
                Some(Reverse(s)) if s.at > self.now => s.at.min(next_step),
                Some(_) => self.now,
                None => next_step,
            };
        }
    }

}

/// Varies how a spoken answer is written without changing what it means.
fn surface_form<R: Rng + ?Sized>(text: &str, slot: SlotType, rng: &mut R) -> String {
    match (slot, rng.gen_range(0..4)) {
        (SlotType::Text | SlotType::Organization, 0) => text.to_uppercase(),
        (SlotType::Text | SlotType::Organization, 1) => format!("  {text} "),
        (SlotType::Number, 0) if text.bytes().all(|b| b.is_ascii_digit()) => format!("0{text}"),
        (SlotType::Number, 1) if text.bytes().all(|b| b.is_ascii_digit()) => format!("{text}.0"),
        _ => text.to_string(),
    }
}

/// Every question text the server could ask for a fixture cell, mapped to
/// that cell. Texts that would name two cells are dropped.
fn question_index(fixture: &SimFixture) -> HashMap<String, CellRef> {
    let kb = &fixture.kb;
    let mut index: HashMap<String, Option<CellRef>> = HashMap::new();
    for row in &kb.rows {
        for t in kb.templates.iter().filter(|t| !t.uses_value()) {
            let Some(col) = kb.column(&t.target_column) else {
                continue;
            };
            if let Ok(text) = instantiate_template(t, row, col, None) {
                let cell = CellRef::new(row.id.clone(), col.name.clone());
                index
                    .entry(text)
                    .and_modify(|e| {
                        if e.as_ref() != Some(&cell) {
                            *e = None;
                        }
                    })
                    .or_insert(Some(cell));
            }
        }
    }
    index.into_iter().filter_map(|(k, v)| v.map(|c| (k, c))).collect()
}

/// Runs the configured games and grades the result against the hidden truth.
pub fn run_simulation(config: &SimConfig) -> Result<SimReport, SimError> {
    run_simulation_detailed(config, false).map(|(report, _, _)| report)
}

/// Like [`run_simulation`], also returning the final server and, when
/// `record` is set, every delivered message.
pub fn run_simulation_detailed(
    config: &SimConfig,
    record: bool,
) -> Result<(SimReport, Server, Vec<Delivery>), SimError> {
    let kb = &config.fixture.kb;
    let categories: Vec<String> = if config.categories.is_empty() {
        kb.categories.iter().cloned().collect()
    } else {
        config.categories.clone()
    };
    if let Some(bad) = categories.iter().find(|c| !kb.has_category(c)) {
        return Err(SimError::Config(format!("unknown category `{bad}`")));
    }
    if categories.is_empty() {
        return Err(SimError::Config("knowledge base has no categories".into()));
    }
    for p in &config.players {
        p.validate()?;
    }
    let seats = config.players_per_game;
    if seats < config.session.min_players || seats > config.session.max_players || seats > config.players.len() {
        return Err(SimError::Config(format!(
            "players_per_game {seats} must be within {}..={} and at most the roster size {}",
            config.session.min_players,
            config.session.max_players,
            config.players.len()
        )));
    }
    for t in &config.fixture.truth {
        if kb.row(&t.row).is_none() || kb.column(&t.column).is_none() {
            return Err(SimError::Config(format!("truth for unknown cell {}/{}", t.row, t.column)));
        }
    }

    let hub = GameHub::new(
        World::new(kb.clone(), ProfileStore::new()),
        config.session.clone(),
        config.seed,
    );
    let server = Server::new(hub, None, ServerOptions::default());

    let mut driver = Driver {
        server,
        clients: Vec::new(),
        by_conn: HashMap::new(),
        now: 0,
        rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED)),
        queue: BinaryHeap::new(),
        pending: HashMap::new(),
        next_order: 0,
        out_seq: HashMap::new(),
        digest: TranscriptDigest::default(),
        transcript: record.then(Vec::new),
        questions: question_index(&config.fixture),
        truth: config.fixture.truth_map(),
        decoys: config.fixture.decoys.clone(),
        trajectories: BTreeMap::new(),
        protocol_errors: 0,
        step_ms: config.step_ms.max(1),
    };
    for (i, p) in config.players.iter().enumerate() {
        let conn = driver.server.connect(0);
        driver.by_conn.insert(conn, i);
        driver.clients.push(Client {
            player: p.clone(),
            conn,
            games_finished: 0,
        });
        driver.send_now(
            i,
            ClientMessage::Hello {
                user_id: p.user_id.clone(),
                display_name: None,
            },
        )?;
    }

    let initial_gaps: Vec<CellRef> = categories
        .iter()
        .flat_map(|c| kb.find_gaps(c, config.session.query.gap_threshold).unwrap_or_default())
        .collect();
    let mut order: Vec<usize> = (0..config.players.len()).collect();
    for game in 0..config.games {
        order.shuffle(&mut driver.rng);
        let mut seated = order[..seats].to_vec();
        seated.sort_unstable();
        let category = &categories[game as usize % categories.len()];
        driver.play_game(game, category, &seated)?;
    }

    let final_kb = driver.server.hub().kb();
    let truth = config.fixture.truth_map();
    let gap_threshold = config.session.query.gap_threshold;
    let mut committed = 0;
    let mut correct = 0;
    for cell_ref in &initial_gaps {
        let Some(cell) = final_kb.cell(cell_ref) else { continue };
        let Some(value) = &cell.value else { continue };
        if cell.confidence < gap_threshold || cell.candidates.is_empty() {
            continue;
        }
        committed += 1;
        let slot = final_kb.column(&cell_ref.column).map_or(SlotType::Text, |c| c.slot_type);
        if truth
            .get(cell_ref)
            .is_some_and(|t| normalize_lenient(t, slot) == *value)
        {
            correct += 1;
        }
    }
    let rounds_played = driver
        .server
        .hub()
        .sessions()
        .map(|s| s.rounds_played)
        .sum();
    let report = SimReport {
        games_played: config.games,
        rounds_played,
        cells_committed: committed,
        cells_committed_correct: correct,
        committed_correct_fraction: (committed > 0 && !truth.is_empty()).then(|| correct as f64 / committed as f64),
        accuracy_trajectories: driver.trajectories,
        protocol_errors: driver.protocol_errors,
        broadcasts: driver.digest.count(),
        transcript_digest: driver.digest.finish(),
        virtual_time_ms: driver.now,
    };
    Ok((report, driver.server, driver.transcript.unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_players() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let decoys = vec!["mit".to_string(), "cmu".to_string()];
        let perfect = SimPlayer {
            latency_ms: LatencyModel { min_ms: 0, max_ms: 0 },
            ..SimPlayer::new("p", 1.0)
        };
        let hopeless = SimPlayer::new("h", 0.0);
        for _ in 0..200 {
            assert_eq!(
                simulate_answer(&perfect, "cmu", &decoys, SlotType::Organization, &mut rng),
                SimAction::Answer("cmu".into())
            );
            assert_eq!(
                simulate_answer(&hopeless, "cmu", &decoys, SlotType::Organization, &mut rng),
                SimAction::Answer("mit".into())
            );
        }
    }

    #[test]
    fn skip_and_drop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let skipper = SimPlayer {
            skip_prob: 1.0,
            ..SimPlayer::new("s", 1.0)
        };
        let dropper = SimPlayer {
            drop_prob: 1.0,
            ..SimPlayer::new("d", 1.0)
        };
        assert_eq!(simulate_answer(&skipper, "x", &[], SlotType::Text, &mut rng), SimAction::Skip);
        assert_eq!(simulate_answer(&dropper, "x", &[], SlotType::Text, &mut rng), SimAction::Silence);
        assert_eq!(
            simulate_answer(&SimPlayer::new("n", 0.0), "x", &[], SlotType::Text, &mut rng),
            SimAction::Answer("not x".into())
        );
    }

    #[test]
    fn surface_forms_normalize_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            for (v, slot) in [("Full", SlotType::Text), ("42", SlotType::Number), ("2013", SlotType::Date)] {
                let s = surface_form(v, slot, &mut rng);
                assert_eq!(normalize_lenient(&s, slot), normalize_lenient(v, slot));
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let fixture = generate_people_fixture(&FixtureSpec::default(), 1);
        let mut cfg = SimConfig::new(fixture, vec![SimPlayer::new("a", 1.0), SimPlayer::new("b", 1.0)], 1, 1);
        cfg.categories = vec!["astronomy".into()];
        assert!(matches!(run_simulation(&cfg), Err(SimError::Config(_))));
        cfg.categories.clear();
        cfg.players[0].reliability = 1.5;
        assert!(matches!(run_simulation(&cfg), Err(SimError::Config(_))));
    }
}
