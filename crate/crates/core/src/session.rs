//! Synchronized game sessions.
//!
//! Each [`GameSession`] is a small state machine driven by player actions
//! and by [`GameSession::tick`] with an injected clock:
//!
//! ```text
//! Lobby --(min players, tick)--> InRound --(all responded | deadlines)--> Reveal
//! Reveal --(reveal pause, more rounds)--> InRound
//! Reveal --(reveal pause, last round)--> Finished
//! ```
//!
//! Every player of a session sees the same question each round. A player has
//! the base answer window to respond and may ask for more time, but the
//! total window for one round never exceeds [`RESPONSE_CAP_MS`]. Rounds end
//! early once everyone has answered or skipped.
//!
//! [`GameHub`] owns the knowledge base, the profile store and all sessions,
//! and does matchmaking. It is the single writer for all three.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{Candidate, CellRef, CommitOutcome, CommitPolicy, KbError, KnowledgeBase, SlotType};
use crate::profiles::{default_badge_rules, BadgeRule, ProfileError, ProfileStore};
use crate::query_gen::{generate_query, generate_query_avoiding, GeneratedQuery, QueryConfig, QueryError};
use crate::scoring::{compute_confidence, resolve_round_winner, AnswerRecord, ConfidenceTable, ScoringError};
use crate::Timestamp;

/// Hard upper bound on one player's response window for one round.
pub const RESPONSE_CAP_MS: u64 = 300_000;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("user `{user}` is already in session `{session}`")]
    Conflict { user: String, session: String },
    #[error("user `{0}` is not a player in this session")]
    NotAPlayer(String),
    #[error("round closed")]
    RoundClosed,
    #[error("already responded this round")]
    AlreadyResponded,
    #[error("empty answer")]
    EmptyAnswer,
    #[error("not allowed while the session is {0:?}")]
    OutOfState(SessionState),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub rounds_total: u32,
    pub min_players: usize,
    pub max_players: usize,
    /// Initial per-player window; clamped to [`RESPONSE_CAP_MS`].
    pub answer_window_ms: u64,
    pub extension_step_ms: u64,
    pub reveal_pause_ms: u64,
    /// Round winners earn this many points times the column difficulty.
    pub round_points_factor: f64,
    pub query: QueryConfig,
    pub commit: CommitPolicy,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            rounds_total: 10,
            min_players: 2,
            max_players: 4,
            answer_window_ms: 120_000,
            extension_step_ms: 60_000,
            reveal_pause_ms: 5_000,
            round_points_factor: 10.0,
            query: QueryConfig::default(),
            commit: CommitPolicy::default(),
        }
    }
}

impl SessionConfig {
    pub fn base_window_ms(&self) -> u64 {
        self.answer_window_ms.min(RESPONSE_CAP_MS)
    }

    /// A session whose players have all been offline this long is ended.
    pub fn abort_after_ms(&self) -> u64 {
        2 * RESPONSE_CAP_MS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Lobby,
    InRound,
    Reveal,
    Finished,
}

impl SessionState {
    /// The transitions a well-behaved session may take.
    pub fn may_transition_to(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Lobby, InRound) | (InRound, Reveal) | (Reveal, InRound) | (Reveal, Finished)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub number: u32,
    pub query: GeneratedQuery,
    pub started_at: Timestamp,
    pub base_window_ms: u64,
    pub responses: BTreeMap<String, AnswerRecord>,
    pub extensions: BTreeMap<String, u64>,
    pub timed_out: BTreeSet<String>,
}

impl Round {
    pub fn window_for(&self, user: &str) -> u64 {
        self.base_window_ms + self.extensions.get(user).copied().unwrap_or(0)
    }

    pub fn deadline_for(&self, user: &str) -> Timestamp {
        self.started_at + self.window_for(user)
    }

    fn settled(&self, user: &str) -> bool {
        self.responses.contains_key(user) || self.timed_out.contains(user)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeVerdict {
    pub user_id: String,
    pub query_id: String,
    pub correct: bool,
    pub difficulty: f64,
    /// Accuracy score after applying the verdict.
    pub score_after: f64,
}

/// Everything decided when a round ends. `target`, `is_probe`,
/// `probe_verdicts` and `commit` are server-side only and never sent to
/// players.
#[derive(Debug, Clone, PartialEq)]
pub struct RevealReport {
    pub session_id: String,
    pub round: u32,
    pub question_id: String,
    /// Normalized answer per player, in join order; `None` for a skip or
    /// a timeout.
    pub answers: Vec<(String, Option<String>)>,
    pub table: ConfidenceTable,
    pub winning_answer: Option<String>,
    pub winners: Vec<String>,
    pub points_awarded: f64,
    /// Session point totals after this round, in join order.
    pub totals: Vec<(String, f64)>,
    pub target: CellRef,
    pub is_probe: bool,
    pub probe_verdicts: Vec<ProbeVerdict>,
    pub commit: Option<CommitOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalReport {
    pub session_id: String,
    pub ranking: Vec<(String, f64)>,
    pub winner: Option<String>,
    pub badges_awarded: BTreeMap<String, Vec<String>>,
    pub rounds_played: u32,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent {
    LobbyChanged {
        session_id: String,
        players: Vec<String>,
    },
    RoundStarted {
        session_id: String,
        players: Vec<String>,
        round: u32,
        question_id: String,
        question_text: String,
        answer_slot: SlotType,
        deadline_ms: Timestamp,
    },
    Revealed {
        players: Vec<String>,
        report: RevealReport,
    },
    GameEnded {
        players: Vec<String>,
        report: FinalReport,
    },
}

impl SessionEvent {
    pub fn recipients(&self) -> &[String] {
        match self {
            SessionEvent::LobbyChanged { players, .. }
            | SessionEvent::RoundStarted { players, .. }
            | SessionEvent::Revealed { players, .. }
            | SessionEvent::GameEnded { players, .. } => players,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundStatus {
    Waiting { outstanding: usize },
    Concluded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimeGrant {
    Granted { deadline_ms: Timestamp },
    Denied { reason: String },
}

/// Shared mutable state every session reads and writes.
#[derive(Debug, Clone)]
pub struct World {
    pub kb: KnowledgeBase,
    pub profiles: ProfileStore,
    pub badge_rules: Vec<BadgeRule>,
}

impl World {
    pub fn new(kb: KnowledgeBase, profiles: ProfileStore) -> Self {
        Self {
            kb,
            profiles,
            badge_rules: default_badge_rules(),
        }
    }

    fn accuracy_of(&self, user: &str) -> f64 {
        self.profiles
            .get(user)
            .map_or(crate::scoring::INITIAL_ACCURACY, |p| p.accuracy.score)
    }
}

#[derive(Debug, Clone)]
pub struct GameSession {
    pub session_id: String,
    pub category: String,
    pub players: Vec<String>,
    pub state: SessionState,
    pub rounds_played: u32,
    pub rounds_total: u32,
    pub round: Option<Round>,
    pub points: BTreeMap<String, f64>,
    pub rng_seed: u64,
    pub created_at: Timestamp,
    /// Every state change so far, in order.
    pub transitions: Vec<(SessionState, SessionState)>,
    pub final_report: Option<FinalReport>,
    config: SessionConfig,
    rng: ChaCha8Rng,
    reveal_since: Option<Timestamp>,
    aborted: bool,
    asked: BTreeSet<CellRef>,
}

impl GameSession {
    pub fn new(
        session_id: impl Into<String>,
        category: impl Into<String>,
        config: SessionConfig,
        rng_seed: u64,
        now: Timestamp,
    ) -> Self {
        Self {
            session_id: session_id.into(),
            category: category.into(),
            players: Vec::new(),
            state: SessionState::Lobby,
            rounds_played: 0,
            rounds_total: config.rounds_total,
            round: None,
            points: BTreeMap::new(),
            rng_seed,
            created_at: now,
            transitions: Vec::new(),
            final_report: None,
            config,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            reveal_since: None,
            aborted: false,
            asked: BTreeSet::new(),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn is_open(&self) -> bool {
        self.state == SessionState::Lobby && self.players.len() < self.config.max_players
    }

    fn set_state(&mut self, next: SessionState) {
        debug_assert!(
            self.state.may_transition_to(next) || self.aborted,
            "illegal transition {:?} -> {next:?}",
            self.state
        );
        self.transitions.push((self.state, next));
        self.state = next;
    }

    fn add_player(&mut self, user: &str) {
        self.players.push(user.to_string());
        self.points.insert(user.to_string(), 0.0);
    }

    fn check_player(&self, user: &str) -> Result<(), SessionError> {
        if self.players.iter().any(|p| p == user) {
            Ok(())
        } else {
            Err(SessionError::NotAPlayer(user.to_string()))
        }
    }

    fn start_round(&mut self, world: &World, now: Timestamp, out: &mut Vec<SessionEvent>) -> Result<(), SessionError> {
        let number = self.rounds_played + 1;
        let query_id = format!("{}-q{number}", self.session_id);
        let query = generate_query_avoiding(
            &world.kb,
            &self.category,
            &self.config.query,
            &mut self.rng,
            query_id,
            &self.asked,
        )?;
        self.asked.insert(query.target.clone());
        let round = Round {
            number,
            started_at: now,
            base_window_ms: self.config.base_window_ms(),
            responses: BTreeMap::new(),
            extensions: BTreeMap::new(),
            timed_out: BTreeSet::new(),
            query,
        };
        out.push(SessionEvent::RoundStarted {
            session_id: self.session_id.clone(),
            players: self.players.clone(),
            round: number,
            question_id: round.query.query_id.clone(),
            question_text: round.query.question_text.clone(),
            answer_slot: round.query.answer_slot,
            deadline_ms: now + round.base_window_ms,
        });
        self.round = Some(round);
        self.reveal_since = None;
        self.set_state(SessionState::InRound);
        Ok(())
    }

    /// Records an answer or a skip. The round concludes at once when every
    /// player has responded or timed out.
    #[allow(clippy::too_many_arguments)]
    pub fn submit_response(
        &mut self,
        world: &mut World,
        user: &str,
        question_id: Option<&str>,
        answer: Option<&str>,
        skip: bool,
        now: Timestamp,
        out: &mut Vec<SessionEvent>,
    ) -> Result<RoundStatus, SessionError> {
        match self.state {
            SessionState::InRound => {}
            SessionState::Reveal | SessionState::Finished => return Err(SessionError::RoundClosed),
            s => return Err(SessionError::OutOfState(s)),
        }
        self.check_player(user)?;
        let round = self.round.as_mut().expect("InRound has a round");
        if question_id.is_some_and(|q| q != round.query.query_id) {
            return Err(SessionError::RoundClosed);
        }
        if round.responses.contains_key(user) {
            return Err(SessionError::AlreadyResponded);
        }
        if round.timed_out.contains(user) || now > round.deadline_for(user) {
            round.timed_out.insert(user.to_string());
            return Err(SessionError::RoundClosed);
        }
        let accuracy = world.accuracy_of(user);
        let record = match answer {
            Some(text) if !skip => {
                if text.trim().is_empty() {
                    return Err(SessionError::EmptyAnswer);
                }
                AnswerRecord::answered(user, &round.query.query_id, text, round.query.answer_slot, accuracy, now)
            }
            None if !skip => return Err(SessionError::EmptyAnswer),
            _ => AnswerRecord::skipped(user, &round.query.query_id, accuracy, now),
        };
        round.responses.insert(user.to_string(), record);
        let outstanding = self.players.iter().filter(|p| !round.settled(p)).count();
        if outstanding == 0 {
            self.conclude_round(world, now, out)?;
            Ok(RoundStatus::Concluded)
        } else {
            Ok(RoundStatus::Waiting { outstanding })
        }
    }

    /// Extends the user's window by one step, never past the cap.
    pub fn request_more_time(&mut self, user: &str, now: Timestamp) -> Result<TimeGrant, SessionError> {
        if self.state != SessionState::InRound {
            return Err(SessionError::OutOfState(self.state));
        }
        self.check_player(user)?;
        let step = self.config.extension_step_ms;
        let round = self.round.as_mut().expect("InRound has a round");
        if round.responses.contains_key(user) {
            return Err(SessionError::AlreadyResponded);
        }
        if round.timed_out.contains(user) || now > round.deadline_for(user) {
            return Err(SessionError::RoundClosed);
        }
        let window = round.window_for(user);
        if window >= RESPONSE_CAP_MS || step == 0 {
            return Ok(TimeGrant::Denied {
                reason: format!("the response window is capped at {} seconds", RESPONSE_CAP_MS / 1000),
            });
        }
        let grant = step.min(RESPONSE_CAP_MS - window);
        *round.extensions.entry(user.to_string()).or_insert(0) += grant;
        Ok(TimeGrant::Granted {
            deadline_ms: round.deadline_for(user),
        })
    }

    /// Advances time-driven transitions up to `now`. Calling it again with
    /// the same `now` does nothing.
    pub fn tick(&mut self, world: &mut World, now: Timestamp, out: &mut Vec<SessionEvent>) -> Result<(), SessionError> {
        loop {
            let before = (self.state, self.rounds_played);
            match self.state {
                SessionState::Lobby => {
                    if self.players.len() >= self.config.min_players {
                        if let Err(e) = self.start_round(world, now, out) {
                            self.abort_with(world, out);
                            return Err(e);
                        }
                    }
                }
                SessionState::InRound => {
                    let round = self.round.as_mut().expect("InRound has a round");
                    for p in &self.players {
                        if !round.settled(p) && now > round.deadline_for(p) {
                            round.timed_out.insert(p.clone());
                        }
                    }
                    if self.players.iter().all(|p| round.settled(p)) {
                        self.conclude_round(world, now, out)?;
                    }
                }
                SessionState::Reveal => {
                    let since = self.reveal_since.unwrap_or(now);
                    if now >= since + self.config.reveal_pause_ms {
                        if self.rounds_played >= self.rounds_total {
                            self.conclude_game(world, out)?;
                        } else if let Err(e) = self.start_round(world, now, out) {
                            // Nothing left to ask: end with current standings.
                            self.aborted = true;
                            self.conclude_game(world, out)?;
                            if !matches!(e, SessionError::Query(QueryError::CategoryExhausted(_))) {
                                return Err(e);
                            }
                        }
                    }
                }
                SessionState::Finished => {}
            }
            if (self.state, self.rounds_played) == before {
                return Ok(());
            }
        }
    }

    /// Fuses the round's answers, grades probes or writes candidates back,
    /// and awards round points.
    pub fn conclude_round(
        &mut self,
        world: &mut World,
        now: Timestamp,
        out: &mut Vec<SessionEvent>,
    ) -> Result<RevealReport, SessionError> {
        if self.state != SessionState::InRound {
            return Err(SessionError::OutOfState(self.state));
        }
        let round = self.round.as_mut().expect("InRound has a round");
        for p in &self.players {
            if !round.responses.contains_key(p) {
                round.timed_out.insert(p.clone());
            }
        }
        let round = self.round.as_ref().expect("InRound has a round");
        let query = &round.query;
        let records: Vec<AnswerRecord> = self
            .players
            .iter()
            .filter_map(|p| round.responses.get(p).cloned())
            .collect();
        let table = match compute_confidence(&records) {
            Ok(t) => t,
            Err(ScoringError::NoResponses) => ConfidenceTable::default(),
            Err(e) => unreachable!("accuracy weights are always valid: {e}"),
        };

        let mut probe_verdicts = Vec::new();
        let mut commit = None;
        let answered: Vec<&AnswerRecord> = records.iter().filter(|r| !r.skipped).collect();
        if query.is_probe {
            let expected = query.expected_answer.as_deref().unwrap_or_default();
            for r in &answered {
                let correct = r.normalized_answer == expected;
                let acc = world.profiles.record_probe(&r.user_id, correct, query.difficulty)?;
                probe_verdicts.push(ProbeVerdict {
                    user_id: r.user_id.clone(),
                    query_id: query.query_id.clone(),
                    correct,
                    difficulty: query.difficulty,
                    score_after: acc.score,
                });
            }
        } else if !answered.is_empty() {
            world.kb.append_candidates(
                &query.target,
                answered.iter().map(|r| Candidate {
                    answer: r.normalized_answer.clone(),
                    user_id: r.user_id.clone(),
                    accuracy: r.accuracy_at_answer,
                }),
            )?;
            let cell = world.kb.cell(&query.target).expect("candidates were just appended");
            let pool = compute_confidence(&cell.pool_records(&query.target))
                .expect("pool holds at least this round's answers");
            commit = Some(world.kb.commit_answers(&query.target, &pool, self.config.commit)?);
        }

        let (winning_answer, winners) = match resolve_round_winner(&table, &records) {
            Ok((a, w)) => (Some(a), w),
            Err(_) => (None, Vec::new()),
        };
        let points_awarded = self.config.round_points_factor * query.difficulty;
        for w in &winners {
            *self.points.entry(w.clone()).or_insert(0.0) += points_awarded;
        }
        let answers = self
            .players
            .iter()
            .map(|p| {
                let a = round
                    .responses
                    .get(p)
                    .filter(|r| !r.skipped)
                    .map(|r| r.normalized_answer.clone());
                (p.clone(), a)
            })
            .collect();
        let report = RevealReport {
            session_id: self.session_id.clone(),
            round: round.number,
            question_id: query.query_id.clone(),
            answers,
            table,
            winning_answer,
            points_awarded: if winners.is_empty() { 0.0 } else { points_awarded },
            winners,
            totals: self.totals(),
            target: query.target.clone(),
            is_probe: query.is_probe,
            probe_verdicts,
            commit,
        };
        self.rounds_played += 1;
        self.reveal_since = Some(now);
        self.set_state(SessionState::Reveal);
        out.push(SessionEvent::Revealed {
            players: self.players.clone(),
            report: report.clone(),
        });
        Ok(report)
    }

    fn totals(&self) -> Vec<(String, f64)> {
        self.players
            .iter()
            .map(|p| (p.clone(), self.points.get(p).copied().unwrap_or(0.0)))
            .collect()
    }

    /// Ranks players, credits lifetime points and evaluates badges.
    pub fn conclude_game(&mut self, world: &mut World, out: &mut Vec<SessionEvent>) -> Result<FinalReport, SessionError> {
        if self.state == SessionState::Finished {
            return Err(SessionError::OutOfState(self.state));
        }
        if self.rounds_played < self.rounds_total && !self.aborted {
            return Err(SessionError::OutOfState(self.state));
        }
        if self.state == SessionState::InRound {
            self.conclude_round(world, self.reveal_since.unwrap_or(0), out)?;
        }
        let mut ranking: Vec<(usize, String, f64, f64)> = self
            .players
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.clone(), self.points[p], world.accuracy_of(p)))
            .collect();
        ranking.sort_by(|a, b| b.2.total_cmp(&a.2).then(b.3.total_cmp(&a.3)).then(a.0.cmp(&b.0)));
        let mut badges_awarded = BTreeMap::new();
        for p in &self.players {
            world.profiles.add_points(p, self.points[p])?;
            let fresh = world.profiles.award_badges(p, &world.badge_rules)?;
            badges_awarded.insert(p.clone(), fresh);
        }
        let report = FinalReport {
            session_id: self.session_id.clone(),
            winner: ranking.first().map(|r| r.1.clone()),
            ranking: ranking.into_iter().map(|r| (r.1, r.2)).collect(),
            badges_awarded,
            rounds_played: self.rounds_played,
            aborted: self.aborted,
        };
        self.set_state(SessionState::Finished);
        self.final_report = Some(report.clone());
        out.push(SessionEvent::GameEnded {
            players: self.players.clone(),
            report: report.clone(),
        });
        Ok(report)
    }

    /// Ends the session early with the current standings.
    pub fn abort(&mut self, world: &mut World, now: Timestamp, out: &mut Vec<SessionEvent>) -> Result<(), SessionError> {
        self.aborted = true;
        match self.state {
            SessionState::Finished => Ok(()),
            SessionState::Lobby => {
                self.set_state(SessionState::Finished);
                Ok(())
            }
            SessionState::InRound => {
                self.conclude_round(world, now, out)?;
                self.conclude_game(world, out).map(|_| ())
            }
            SessionState::Reveal => self.conclude_game(world, out).map(|_| ()),
        }
    }

    fn abort_with(&mut self, world: &mut World, out: &mut Vec<SessionEvent>) {
        self.aborted = true;
        if self.state == SessionState::Lobby {
            self.set_state(SessionState::Finished);
            let report = FinalReport {
                session_id: self.session_id.clone(),
                ranking: self.totals(),
                winner: None,
                badges_awarded: BTreeMap::new(),
                rounds_played: 0,
                aborted: true,
            };
            self.final_report = Some(report.clone());
            out.push(SessionEvent::GameEnded {
                players: self.players.clone(),
                report,
            });
        } else {
            let _ = self.conclude_game(world, out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinOutcome {
    pub session_id: String,
    pub players: Vec<String>,
    pub state: SessionState,
}

/// Finished sessions kept around for inspection.
const FINISHED_RETENTION: usize = 256;

/// Matchmaking plus the single writer over the knowledge base, profiles
/// and every session.
#[derive(Debug)]
pub struct GameHub {
    config: SessionConfig,
    world: World,
    sessions: BTreeMap<u64, GameSession>,
    by_id: HashMap<String, u64>,
    active: HashMap<String, String>,
    offline_since: HashMap<String, Timestamp>,
    next_session: u64,
    seed: u64,
    events: Vec<SessionEvent>,
    probe_log: Vec<ProbeVerdict>,
}

impl GameHub {
    pub fn new(world: World, config: SessionConfig, seed: u64) -> Self {
        Self {
            config,
            world,
            sessions: BTreeMap::new(),
            by_id: HashMap::new(),
            active: HashMap::new(),
            offline_since: HashMap::new(),
            next_session: 1,
            seed,
            events: Vec::new(),
            probe_log: Vec::new(),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut World {
        &mut self.world
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.world.kb
    }

    pub fn profiles(&self) -> &ProfileStore {
        &self.world.profiles
    }

    /// Every graded probe answer so far, in grading order.
    pub fn probe_log(&self) -> &[ProbeVerdict] {
        &self.probe_log
    }

    pub fn session(&self, session_id: &str) -> Option<&GameSession> {
        self.by_id.get(session_id).and_then(|k| self.sessions.get(k))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &GameSession> {
        self.sessions.values()
    }

    /// The session `user` is currently playing or waiting in.
    pub fn session_of(&self, user: &str) -> Option<&str> {
        self.active.get(user).map(String::as_str)
    }

    pub fn drain_events(&mut self) -> Vec<SessionEvent> {
        std::mem::take(&mut self.events)
    }

    fn session_key(&self, session_id: &str) -> Result<u64, SessionError> {
        self.by_id
            .get(session_id)
            .copied()
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_string()))
    }

    pub fn join_game(&mut self, user: &str, category: &str, now: Timestamp) -> Result<JoinOutcome, SessionError> {
        if self.world.profiles.get(user).is_none() {
            return Err(SessionError::UnknownUser(user.to_string()));
        }
        if !self.world.kb.has_category(category) {
            return Err(SessionError::UnknownCategory(category.to_string()));
        }
        if let Some(s) = self.active.get(user) {
            return Err(SessionError::Conflict {
                user: user.to_string(),
                session: s.clone(),
            });
        }
        let open = self
            .sessions
            .iter()
            .find(|(_, s)| s.category == category && s.is_open())
            .map(|(k, _)| *k);
        let key = match open {
            Some(k) => k,
            None => {
                // Refuse to open a lobby that could never ask anything.
                let mut probe_rng = ChaCha8Rng::seed_from_u64(0);
                generate_query(&self.world.kb, category, &self.config.query, &mut probe_rng, "check")?;
                let k = self.next_session;
                self.next_session += 1;
                let seed = self.seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let id = format!("s{k}");
                self.sessions
                    .insert(k, GameSession::new(id.clone(), category, self.config.clone(), seed, now));
                self.by_id.insert(id, k);
                k
            }
        };
        let session = self.sessions.get_mut(&key).expect("session exists");
        session.add_player(user);
        self.active.insert(user.to_string(), session.session_id.clone());
        self.events.push(SessionEvent::LobbyChanged {
            session_id: session.session_id.clone(),
            players: session.players.clone(),
        });
        Ok(JoinOutcome {
            session_id: session.session_id.clone(),
            players: session.players.clone(),
            state: session.state,
        })
    }

    pub fn submit_response(
        &mut self,
        session_id: &str,
        user: &str,
        question_id: Option<&str>,
        answer: Option<&str>,
        skip: bool,
        now: Timestamp,
    ) -> Result<RoundStatus, SessionError> {
        let key = self.session_key(session_id)?;
        let mut out = Vec::new();
        let session = self.sessions.get_mut(&key).expect("session exists");
        let result = session.submit_response(&mut self.world, user, question_id, answer, skip, now, &mut out);
        self.absorb(out);
        result
    }

    pub fn request_more_time(&mut self, session_id: &str, user: &str, now: Timestamp) -> Result<TimeGrant, SessionError> {
        let key = self.session_key(session_id)?;
        self.sessions
            .get_mut(&key)
            .expect("session exists")
            .request_more_time(user, now)
    }

    pub fn set_presence(&mut self, user: &str, online: bool, now: Timestamp) {
        if online {
            self.offline_since.remove(user);
        } else {
            self.offline_since.entry(user.to_string()).or_insert(now);
        }
    }

    /// Drives every session's time-based transitions and returns the
    /// resulting events (including ones queued by earlier calls).
    pub fn tick(&mut self, now: Timestamp) -> Vec<SessionEvent> {
        let abort_after = self.config.abort_after_ms();
        let mut out = Vec::new();
        for session in self.sessions.values_mut() {
            if session.state == SessionState::Finished {
                continue;
            }
            let abandoned = !session.players.is_empty()
                && session.players.iter().all(|p| {
                    self.offline_since
                        .get(p)
                        .is_some_and(|since| now.saturating_sub(*since) > abort_after)
                });
            let result = if abandoned {
                session.abort(&mut self.world, now, &mut out)
            } else {
                session.tick(&mut self.world, now, &mut out)
            };
            if let Err(e) = result {
                tracing::warn!(session = %session.session_id, error = %e, "session ended early");
            }
        }
        self.absorb(out);
        self.drain_events()
    }

    fn absorb(&mut self, out: Vec<SessionEvent>) {
        for ev in &out {
            match ev {
                SessionEvent::Revealed { report, .. } => {
                    self.probe_log.extend(report.probe_verdicts.iter().cloned());
                }
                SessionEvent::GameEnded { players, report } => {
                    for p in players {
                        if self.active.get(p) == Some(&report.session_id) {
                            self.active.remove(p);
                        }
                    }
                }
                _ => {}
            }
        }
        // Lobbies that were torn down without a game emit nothing else.
        let finished: Vec<(u64, Vec<String>, String)> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.state == SessionState::Finished)
            .map(|(k, s)| (*k, s.players.clone(), s.session_id.clone()))
            .collect();
        for (_, players, id) in &finished {
            for p in players {
                if self.active.get(p) == Some(id) {
                    self.active.remove(p);
                }
            }
        }
        if finished.len() > FINISHED_RETENTION {
            for (k, _, id) in &finished[..finished.len() - FINISHED_RETENTION] {
                self.sessions.remove(k);
                self.by_id.remove(id);
            }
        }
        self.events.extend(out);
    }

    /// Session points and accuracy for a score request. Points come from
    /// `session_id` if given, else the user's current session, else their
    /// lifetime total.
    pub fn score_of(&self, user: &str, session_id: Option<&str>) -> Result<(f64, f64), SessionError> {
        let profile = self
            .world
            .profiles
            .get(user)
            .ok_or_else(|| SessionError::UnknownUser(user.to_string()))?;
        let sid = session_id.or_else(|| self.session_of(user));
        let points = match sid {
            Some(id) => {
                let s = self
                    .session(id)
                    .ok_or_else(|| SessionError::UnknownSession(id.to_string()))?;
                *s.points.get(user).ok_or_else(|| SessionError::NotAPlayer(user.to_string()))?
            }
            None => profile.lifetime_points,
        };
        Ok((points, profile.accuracy.score))
    }
}
