//! Two players play a short game against the in-process protocol server.
//! Every line crosses the real encoder and decoder; time is simulated.

use datapop::kb::KnowledgeBase;
use datapop::profiles::ProfileStore;
use datapop::protocol::{ConnId, Outbound, ServerOptions};
use datapop::protocol::{decode_server, encode_message, ClientMessage, Frame, Server, ServerMessage};
use datapop::session::{GameHub, SessionConfig, World};
use datapop::sim::{generate_people_fixture, FixtureSpec};

fn send(server: &mut Server, conn: ConnId, msg: ClientMessage, now: u64) -> Vec<Outbound> {
    let line = encode_message(&Frame::new(msg)).unwrap();
    server.handle_line(conn, &line, now)
}

fn main() {
    let fixture = generate_people_fixture(&FixtureSpec { rows: 8, ..FixtureSpec::default() }, 3);
    let kb: KnowledgeBase = fixture.kb;
    let category = kb.categories.iter().next().unwrap().clone();
    let config = SessionConfig { rounds_total: 3, answer_window_ms: 2_000, reveal_pause_ms: 500, ..SessionConfig::default() };
    let hub = GameHub::new(World::new(kb, ProfileStore::new()), config, 11);
    let mut server = Server::new(hub, None, ServerOptions::default());

    let mut now = 0;
    let players = ["ana", "ben"];
    let conns: Vec<ConnId> = players.iter().map(|_| server.connect(now)).collect();
    let mut queue = Vec::new();
    for (conn, user) in conns.iter().zip(players) {
        queue.extend(send(&mut server, *conn, ClientMessage::Hello { user_id: user.into(), display_name: None }, now));
        queue.extend(send(&mut server, *conn, ClientMessage::JoinGame { category: category.clone() }, now));
    }

    let mut finished = 0;
    while finished < players.len() {
        let mut replies = Vec::new();
        for action in queue.drain(..) {
            let Outbound::Send { conn, frame } = action else { continue };
            let line = encode_message(&frame).unwrap();
            let msg = decode_server(&line).unwrap().body;
            let who = players[conns.iter().position(|c| *c == conn).unwrap()];
            println!("-> {who}: {}", String::from_utf8_lossy(&line).trim_end());
            match msg {
                ServerMessage::RoundStart { session_id, question_id, .. } => {
                    let text = if who == "ana" { "MIT" } else { "mit" };
                    replies.push((conn, ClientMessage::Answer { session_id, question_id, text: text.into() }));
                }
                ServerMessage::GameEnd { .. } => finished += 1,
                _ => {}
            }
        }
        for (conn, msg) in replies {
            queue.extend(send(&mut server, conn, msg, now));
        }
        now += 100;
        queue.extend(server.tick(now));
    }
    let ana = server.hub().profiles().get("ana").unwrap();
    println!("ana: {} lifetime points, accuracy {:.2}", ana.lifetime_points, ana.accuracy.score);
}
