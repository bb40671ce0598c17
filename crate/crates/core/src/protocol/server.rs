use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::profiles::{classify_interests, list_badges, EmbeddingTable, ProfileError};
use crate::session::{GameHub, SessionEvent, TimeGrant};
use crate::Timestamp;

use super::{
    decode_client, BadgeEntry, ClientMessage, Frame, PlayerTotal, RankEntry, RevealAnswer, RevealConfidence,
    ServerMessage,
};

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq)]
pub enum Outbound {
    Send { conn: ConnId, frame: Frame<ServerMessage> },
    Close { conn: ConnId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptions {
    pub heartbeat_ms: u64,
    /// Missed heartbeats before a connection is dropped.
    pub missed_heartbeats: u64,
    /// Messages kept for an offline user; older ones are discarded first.
    pub max_pending: usize,
    /// How many interest categories to keep from setup.
    pub interests_k: usize,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            heartbeat_ms: 15_000,
            missed_heartbeats: 3,
            max_pending: 1024,
            interests_k: 3,
        }
    }
}

#[derive(Debug)]
struct Conn {
    user: Option<String>,
    out_seq: u64,
    in_seq: Option<u64>,
    last_seen: Timestamp,
    last_ping: Timestamp,
}

/// The protocol endpoint without any I/O: lines in, frames out.
///
/// Transports call [`Server::connect`], feed every received line to
/// [`Server::handle_line`], call [`Server::tick`] periodically, and deliver
/// the returned [`Outbound`] actions in order.
#[derive(Debug)]
pub struct Server {
    hub: GameHub,
    embeddings: EmbeddingTable,
    options: ServerOptions,
    conns: BTreeMap<ConnId, Conn>,
    user_conn: HashMap<String, ConnId>,
    pending: HashMap<String, VecDeque<ServerMessage>>,
    next_conn: ConnId,
    dirty: bool,
}

impl Server {
    pub fn new(hub: GameHub, embeddings: Option<EmbeddingTable>, options: ServerOptions) -> Self {
        let embeddings = embeddings.unwrap_or_else(|| EmbeddingTable::from_categories(&hub.kb().categories));
        Self {
            hub,
            embeddings,
            options,
            conns: BTreeMap::new(),
            user_conn: HashMap::new(),
            pending: HashMap::new(),
            next_conn: 1,
            dirty: false,
        }
    }

    pub fn hub(&self) -> &GameHub {
        &self.hub
    }

    pub fn hub_mut(&mut self) -> &mut GameHub {
        &mut self.hub
    }

    /// True once if any game ended since the last call; the KB and profile
    /// stores should then be persisted.
    pub fn take_dirty(&mut self) -> bool {
        std::mem::take(&mut self.dirty)
    }

    pub fn connect(&mut self, now: Timestamp) -> ConnId {
        let id = self.next_conn;
        self.next_conn += 1;
        self.conns.insert(
            id,
            Conn {
                user: None,
                out_seq: 0,
                in_seq: None,
                last_seen: now,
                last_ping: now,
            },
        );
        id
    }

    pub fn user_of(&self, conn: ConnId) -> Option<&str> {
        self.conns.get(&conn).and_then(|c| c.user.as_deref())
    }

    pub fn pending_for(&self, user: &str) -> usize {
        self.pending.get(user).map_or(0, VecDeque::len)
    }

    pub fn disconnect(&mut self, conn: ConnId, now: Timestamp) {
        if let Some(c) = self.conns.remove(&conn) {
            if let Some(user) = c.user {
                if self.user_conn.get(&user) == Some(&conn) {
                    self.user_conn.remove(&user);
                    self.hub.set_presence(&user, false, now);
                }
            }
        }
    }

    fn send(&mut self, conn: ConnId, body: ServerMessage, out: &mut Vec<Outbound>) {
        if let Some(c) = self.conns.get_mut(&conn) {
            c.out_seq += 1;
            out.push(Outbound::Send {
                conn,
                frame: Frame::with_seq(c.out_seq, body),
            });
        }
    }

    /// Delivers to the user's connection, or queues until they reconnect.
    fn send_to_user(&mut self, user: &str, body: ServerMessage, out: &mut Vec<Outbound>) {
        match self.user_conn.get(user).copied() {
            Some(conn) => self.send(conn, body, out),
            None => {
                let q = self.pending.entry(user.to_string()).or_default();
                if q.len() >= self.options.max_pending {
                    q.pop_front();
                }
                q.push_back(body);
            }
        }
    }

    pub fn handle_line(&mut self, conn: ConnId, line: &[u8], now: Timestamp) -> Vec<Outbound> {
        match decode_client(line) {
            Ok(frame) => self.handle_message(conn, frame, now),
            Err(e) => {
                let mut out = Vec::new();
                if let Some(c) = self.conns.get_mut(&conn) {
                    c.last_seen = now;
                }
                self.send(conn, ServerMessage::error(e.to_string()), &mut out);
                out
            }
        }
    }

    pub fn handle_message(&mut self, conn: ConnId, frame: Frame<ClientMessage>, now: Timestamp) -> Vec<Outbound> {
        let mut out = Vec::new();
        let Some(c) = self.conns.get_mut(&conn) else {
            return out;
        };
        c.last_seen = now;
        if let Some(seq) = frame.seq {
            if c.in_seq.is_some_and(|prev| seq <= prev) {
                self.send(conn, ServerMessage::error("sequence number did not increase"), &mut out);
                return out;
            }
            c.in_seq = Some(seq);
        }
        let bound = c.user.clone();

        let user = match (&frame.body, bound) {
            (ClientMessage::Hello { user_id, display_name }, bound) => {
                self.hello(conn, bound, user_id, display_name.as_deref(), now, &mut out);
                return out;
            }
            (ClientMessage::Ping {}, _) => {
                self.send(conn, ServerMessage::Pong {}, &mut out);
                return out;
            }
            (ClientMessage::Pong {}, _) => return out,
            (_, None) => {
                self.send(conn, ServerMessage::error("send hello first"), &mut out);
                return out;
            }
            (_, Some(u)) => u,
        };

        let reply = match frame.body {
            ClientMessage::SetupInterests { phrases } => self.setup_interests(&user, &phrases),
            ClientMessage::JoinGame { category } => match self.hub.join_game(&user, &category, now) {
                Ok(_) => None,
                Err(e) => Some(ServerMessage::error(e.to_string())),
            },
            ClientMessage::Answer {
                session_id,
                question_id,
                text,
            } => self
                .hub
                .submit_response(&session_id, &user, Some(&question_id), Some(&text), false, now)
                .err()
                .map(|e| ServerMessage::error(e.to_string())),
            ClientMessage::Skip {
                session_id,
                question_id,
            } => self
                .hub
                .submit_response(&session_id, &user, Some(&question_id), None, true, now)
                .err()
                .map(|e| ServerMessage::error(e.to_string())),
            ClientMessage::MoreTime { session_id } => Some(match self.hub.request_more_time(&session_id, &user, now) {
                Ok(TimeGrant::Granted { deadline_ms }) => ServerMessage::TimeGrant { deadline_ms },
                Ok(TimeGrant::Denied { reason }) => ServerMessage::Denied { reason },
                Err(e) => ServerMessage::error(e.to_string()),
            }),
            ClientMessage::ScoreQuery { session_id } => Some(match self.hub.score_of(&user, session_id.as_deref()) {
                Ok((points, accuracy)) => ServerMessage::Score { points, accuracy },
                Err(e) => ServerMessage::error(e.to_string()),
            }),
            ClientMessage::BadgeList {} => {
                let world = self.hub.world();
                let badges = world
                    .profiles
                    .get(&user)
                    .map(|p| list_badges(p, &world.badge_rules))
                    .unwrap_or_default()
                    .into_iter()
                    .map(|b| BadgeEntry { id: b.id, name: b.name })
                    .collect();
                Some(ServerMessage::Badges { badges })
            }
            ClientMessage::Hello { .. } | ClientMessage::Ping {} | ClientMessage::Pong {} => unreachable!(),
        };
        if let Some(reply) = reply {
            self.send(conn, reply, &mut out);
        }
        let events = self.hub.drain_events();
        self.broadcast(events, &mut out);
        out
    }

    fn hello(
        &mut self,
        conn: ConnId,
        bound: Option<String>,
        user_id: &str,
        display_name: Option<&str>,
        now: Timestamp,
        out: &mut Vec<Outbound>,
    ) {
        if let Some(b) = bound {
            if b != user_id {
                self.send(conn, ServerMessage::error(format!("connection already bound to `{b}`")), out);
                return;
            }
        }
        if let Some(old) = self.user_conn.insert(user_id.to_string(), conn) {
            if old != conn {
                if let Some(c) = self.conns.get_mut(&old) {
                    c.user = None;
                }
                out.push(Outbound::Close { conn: old });
                self.conns.remove(&old);
            }
        }
        if let Some(c) = self.conns.get_mut(&conn) {
            c.user = Some(user_id.to_string());
        }
        let world = self.hub.world_mut();
        let profile = world.profiles.ensure(user_id, display_name, now);
        let welcome = ServerMessage::Welcome {
            user_id: user_id.to_string(),
            accuracy: profile.accuracy.score,
            lifetime_points: profile.lifetime_points,
        };
        self.hub.set_presence(user_id, true, now);
        self.send(conn, welcome, out);
        if let Some(queued) = self.pending.remove(user_id) {
            for msg in queued {
                self.send(conn, msg, out);
            }
        }
    }

    fn setup_interests(&mut self, user: &str, phrases: &[String]) -> Option<ServerMessage> {
        let categories = self.hub.kb().categories.clone();
        let result = classify_interests(phrases, &self.embeddings, self.embeddings.categories().count())
            .map(|ranked| {
                ranked
                    .into_iter()
                    .filter(|c| categories.contains(c))
                    .take(self.options.interests_k)
                    .collect::<Vec<_>>()
            })
            .and_then(|chosen| {
                if chosen.is_empty() {
                    Err(ProfileError::NoKnownWords)
                } else {
                    self.hub
                        .world_mut()
                        .profiles
                        .set_interests(user, chosen.clone(), &categories)
                        .map(|_| chosen)
                }
            });
        Some(match result {
            Ok(categories) => ServerMessage::InterestsAck { categories },
            Err(e) => ServerMessage::error(e.to_string()),
        })
    }

    fn broadcast(&mut self, events: Vec<SessionEvent>, out: &mut Vec<Outbound>) {
        for ev in events {
            if matches!(ev, SessionEvent::GameEnded { .. }) {
                self.dirty = true;
            }
            let recipients = ev.recipients().to_vec();
            let msg = event_message(ev);
            for user in &recipients {
                self.send_to_user(user, msg.clone(), out);
            }
        }
    }

    /// Advances game time, emits broadcasts, and runs heartbeats.
    pub fn tick(&mut self, now: Timestamp) -> Vec<Outbound> {
        let mut out = Vec::new();
        let events = self.hub.tick(now);
        self.broadcast(events, &mut out);

        let hb = self.options.heartbeat_ms;
        if hb > 0 {
            let limit = hb * self.options.missed_heartbeats;
            let mut dead = Vec::new();
            let mut ping = Vec::new();
            for (&id, c) in &mut self.conns {
                if now.saturating_sub(c.last_seen) > limit {
                    dead.push(id);
                } else if now.saturating_sub(c.last_ping) >= hb {
                    c.last_ping = now;
                    ping.push(id);
                }
            }
            for id in ping {
                self.send(id, ServerMessage::Ping {}, &mut out);
            }
            for id in dead {
                self.disconnect(id, now);
                out.push(Outbound::Close { conn: id });
            }
        }
        out
    }
}

fn event_message(ev: SessionEvent) -> ServerMessage {
    match ev {
        SessionEvent::LobbyChanged { session_id, players } => ServerMessage::LobbyStatus { session_id, players },
        SessionEvent::RoundStarted {
            session_id,
            round,
            question_id,
            question_text,
            answer_slot,
            deadline_ms,
            ..
        } => ServerMessage::RoundStart {
            session_id,
            round,
            question_id,
            question_text,
            answer_slot,
            deadline_ms,
        },
        SessionEvent::Revealed { report, .. } => ServerMessage::Reveal {
            session_id: report.session_id,
            round: report.round,
            answers: report
                .answers
                .into_iter()
                .map(|(user_id, answer)| RevealAnswer { user_id, answer })
                .collect(),
            confidence: report
                .table
                .entries
                .into_iter()
                .map(|e| RevealConfidence {
                    answer: e.answer,
                    c: e.confidence,
                })
                .collect(),
            winners: report.winners,
            points: report
                .totals
                .into_iter()
                .map(|(user_id, total)| PlayerTotal { user_id, total })
                .collect(),
        },
        SessionEvent::GameEnded { report, .. } => ServerMessage::GameEnd {
            session_id: report.session_id,
            ranking: report
                .ranking
                .into_iter()
                .map(|(user_id, points)| RankEntry { user_id, points })
                .collect(),
            winner: report.winner,
        },
    }
}
