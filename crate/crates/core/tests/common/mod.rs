#![allow(dead_code)]

use std::collections::BTreeMap;

use datapop::kb::KnowledgeBase;
use datapop::profiles::ProfileStore;
use datapop::protocol::{
    decode_server, encode_message, ClientMessage, ConnId, Frame, Outbound, Server, ServerMessage, ServerOptions,
};
use datapop::session::{GameHub, SessionConfig, World};
use datapop::sim::{generate_people_fixture, FixtureSpec, SimFixture};

/// One decoded server message plus the raw line and virtual arrival time.
#[derive(Debug, Clone)]
pub struct Received {
    pub at: u64,
    pub line: String,
    pub msg: ServerMessage,
}

/// Drives a [`Server`] in process. Every frame is encoded to a line and
/// decoded again, in both directions.
pub struct Wire {
    pub server: Server,
    pub now: u64,
    pub inbox: BTreeMap<ConnId, Vec<Received>>,
    pub closed: Vec<ConnId>,
}

impl Wire {
    pub fn new(server: Server) -> Self {
        Self { server, now: 0, inbox: BTreeMap::new(), closed: Vec::new() }
    }

    pub fn connect(&mut self) -> ConnId {
        let c = self.server.connect(self.now);
        self.inbox.insert(c, Vec::new());
        c
    }

    pub fn hello(&mut self, user: &str) -> ConnId {
        let c = self.connect();
        self.send(c, ClientMessage::Hello { user_id: user.into(), display_name: None });
        c
    }

    pub fn send(&mut self, conn: ConnId, msg: ClientMessage) {
        let line = encode_message(&Frame::new(msg)).unwrap();
        self.send_raw(conn, &line);
    }

    pub fn send_raw(&mut self, conn: ConnId, line: &[u8]) {
        let out = self.server.handle_line(conn, line, self.now);
        self.absorb(out);
    }

    pub fn disconnect(&mut self, conn: ConnId) {
        self.server.disconnect(conn, self.now);
    }

    fn absorb(&mut self, out: Vec<Outbound>) {
        for o in out {
            match o {
                Outbound::Send { conn, frame } => {
                    let bytes = encode_message(&frame).unwrap();
                    assert_eq!(bytes.iter().filter(|b| **b == b'\n').count(), 1);
                    let msg = decode_server(&bytes).unwrap().body;
                    let line = String::from_utf8(bytes).unwrap();
                    self.inbox.entry(conn).or_default().push(Received { at: self.now, line, msg });
                }
                Outbound::Close { conn } => self.closed.push(conn),
            }
        }
    }

    /// Advances the clock in 100 ms steps.
    pub fn advance(&mut self, ms: u64) {
        let end = self.now + ms;
        while self.now < end {
            self.now = (self.now + 100).min(end);
            let out = self.server.tick(self.now);
            self.absorb(out);
        }
    }

    pub fn take(&mut self, conn: ConnId) -> Vec<Received> {
        std::mem::take(self.inbox.entry(conn).or_default())
    }

    pub fn messages(&self, conn: ConnId) -> Vec<&ServerMessage> {
        self.inbox.get(&conn).map(|v| v.iter().map(|r| &r.msg).collect()).unwrap_or_default()
    }
}

pub fn server_for(kb: KnowledgeBase, config: SessionConfig, seed: u64) -> Server {
    let options = ServerOptions { heartbeat_ms: 0, ..ServerOptions::default() };
    Server::new(GameHub::new(World::new(kb, ProfileStore::new()), config, seed), None, options)
}

pub fn fixture(rows: usize, seed: u64) -> SimFixture {
    generate_people_fixture(&FixtureSpec { rows, ..FixtureSpec::default() }, seed)
}

pub fn fast_config(players: usize) -> SessionConfig {
    SessionConfig {
        min_players: players,
        answer_window_ms: 2_000,
        extension_step_ms: 1_000,
        reveal_pause_ms: 500,
        ..SessionConfig::default()
    }
}

/// A knowledge base with candidate pools and a profile store, both filled
/// from `seed`.
pub fn seeded_stores(seed: u64) -> (KnowledgeBase, ProfileStore) {
    use datapop::kb::{Candidate, CellRef};
    use datapop::profiles::UserProfile;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut kb = fixture(rng.gen_range(1..30), seed).kb;
    let words = ["full", "MIT", "2011-04", "ünïcode", "a \"quoted\" name", "line\nbreak", "42.5"];
    let targets: Vec<CellRef> = kb
        .rows
        .iter()
        .flat_map(|r| kb.columns.iter().map(move |c| CellRef::new(r.id.clone(), c.name.clone())))
        .collect();
    for _ in 0..rng.gen_range(0..20) {
        let target = &targets[rng.gen_range(0..targets.len())];
        let pool: Vec<Candidate> = (0..rng.gen_range(1..5))
            .map(|_| Candidate {
                answer: words[rng.gen_range(0..words.len())].to_string(),
                user_id: format!("u{}", rng.gen_range(0..6)),
                accuracy: rng.gen_range(0.0..5.0),
            })
            .collect();
        kb.append_candidates(target, pool).unwrap();
    }

    let mut store = ProfileStore::new();
    let categories: Vec<String> = kb.categories.iter().cloned().collect();
    for i in 0..rng.gen_range(0..8) {
        let mut p = UserProfile::new(format!("u{i}"), words[rng.gen_range(0..words.len())], rng.gen());
        p.accuracy.score = 0.5 + rng.gen_range(0.0..20.0);
        p.accuracy.probes_answered = rng.gen_range(0..100);
        p.accuracy.probes_correct = rng.gen_range(0..=p.accuracy.probes_answered);
        p.lifetime_points = rng.gen_range(0.0..500.0);
        p.interests = categories.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect();
        p.badges = ["bronze", "scout"].iter().filter(|_| rng.gen_bool(0.5)).map(|b| b.to_string()).collect();
        store.register(p).unwrap();
    }
    (kb, store)
}
