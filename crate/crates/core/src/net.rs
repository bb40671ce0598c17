//! Network transports for the protocol server.
//!
//! One actor task owns the [`Server`]; every connection task forwards its
//! lines to it over a channel, so all session mutations happen in a single
//! order. Two listeners share the actor:
//!
//! * TCP, newline-delimited JSON (try it with `nc localhost 7878`);
//! * WebSocket, one JSON object per text frame, for browser clients.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use futures_util::{SinkExt, StreamExt};
use serde::Deserialize;
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message as WsMessage;

use crate::kb::{KbError, KnowledgeBase};
use crate::profiles::{EmbeddingTable, ProfileError, ProfileStore};
use crate::protocol::{encode_text, ConnId, Outbound, Server, ServerOptions, MAX_LINE_BYTES};
use crate::session::{GameHub, SessionConfig, World, RESPONSE_CAP_MS};
use crate::Timestamp;

pub const CONFIG_ENV: &str = "DATAPOP_CONFIG";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Server settings from flags or a TOML config file. Flags win.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, clap::Parser)]
#[command(name = "datapop-server", about = "Knowledge-base population trivia server")]
#[serde(deny_unknown_fields)]
pub struct ServerSettings {
    /// Knowledge base JSON file.
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Profile store JSON file; created if missing.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// TCP port for newline-delimited JSON.
    #[arg(long)]
    pub port: Option<u16>,
    /// WebSocket port; defaults to port + 1 (or any free port when port is 0).
    #[arg(long)]
    pub ws_port: Option<u16>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rounds: Option<u32>,
    #[arg(long)]
    pub probe_ratio: Option<f64>,
    #[arg(long)]
    pub gap_threshold: Option<f64>,
    #[arg(long)]
    pub commit_threshold: Option<f64>,
    /// Base answer window in seconds, at most 300.
    #[arg(long)]
    pub answer_window_s: Option<u64>,
    #[arg(long)]
    pub min_players: Option<usize>,
    /// Word embedding file for interest setup.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Category centroid file matching --embeddings.
    #[arg(long)]
    pub centroids: Option<PathBuf>,
}

impl ServerSettings {
    pub fn from_toml(text: &str) -> Result<Self, NetError> {
        toml::from_str(text).map_err(|e| NetError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, NetError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Fields set in `over` replace those in `self`.
    pub fn overlay(self, over: ServerSettings) -> Self {
        Self {
            kb: over.kb.or(self.kb),
            profiles: over.profiles.or(self.profiles),
            port: over.port.or(self.port),
            ws_port: over.ws_port.or(self.ws_port),
            seed: over.seed.or(self.seed),
            rounds: over.rounds.or(self.rounds),
            probe_ratio: over.probe_ratio.or(self.probe_ratio),
            gap_threshold: over.gap_threshold.or(self.gap_threshold),
            commit_threshold: over.commit_threshold.or(self.commit_threshold),
            answer_window_s: over.answer_window_s.or(self.answer_window_s),
            min_players: over.min_players.or(self.min_players),
            embeddings: over.embeddings.or(self.embeddings),
            centroids: over.centroids.or(self.centroids),
        }
    }

    /// Reads the file named by `DATAPOP_CONFIG`, if any, under `flags`.
    pub fn with_env_file(flags: ServerSettings) -> Result<Self, NetError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(path) => Ok(Self::from_file(Path::new(&path))?.overlay(flags)),
            None => Ok(flags),
        }
    }

    pub fn session_config(&self) -> Result<SessionConfig, NetError> {
        let mut cfg = SessionConfig::default();
        let fraction = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(v)
            } else {
                Err(NetError::Config(format!("{name} must be within [0, 1], got {v}")))
            }
        };
        if let Some(r) = self.rounds {
            if r == 0 {
                return Err(NetError::Config("rounds must be at least 1".into()));
            }
            cfg.rounds_total = r;
        }
        if let Some(p) = self.probe_ratio {
            cfg.query.probe_ratio = fraction("probe-ratio", p)?;
        }
        if let Some(g) = self.gap_threshold {
            cfg.query.gap_threshold = fraction("gap-threshold", g)?;
        }
        if let Some(c) = self.commit_threshold {
            cfg.commit.threshold = fraction("commit-threshold", c)?;
        }
        if let Some(w) = self.answer_window_s {
            if w == 0 || w * 1000 > RESPONSE_CAP_MS {
                return Err(NetError::Config(format!(
                    "answer-window-s must be within 1..={}, got {w}",
                    RESPONSE_CAP_MS / 1000
                )));
            }
            cfg.answer_window_ms = w * 1000;
        }
        if let Some(m) = self.min_players {
            if m == 0 || m > cfg.max_players {
                return Err(NetError::Config(format!(
                    "min-players must be within 1..={}, got {m}",
                    cfg.max_players
                )));
            }
            cfg.min_players = m;
        }
        Ok(cfg)
    }

    /// Loads the KB, profiles and embeddings named by these settings.
    pub fn build_server(&self) -> Result<Server, NetError> {
        let kb_path = self
            .kb
            .as_ref()
            .ok_or_else(|| NetError::Config("--kb is required".into()))?;
        let kb = KnowledgeBase::load_path(kb_path)?;
        let profiles = match &self.profiles {
            Some(p) => ProfileStore::load_or_default(p)?,
            None => ProfileStore::new(),
        };
        let embeddings = match (&self.embeddings, &self.centroids) {
            (Some(w), Some(c)) => Some(EmbeddingTable::from_paths(w, c)?),
            (None, None) => None,
            _ => return Err(NetError::Config("--embeddings and --centroids go together".into())),
        };
        let hub = GameHub::new(World::new(kb, profiles), self.session_config()?, self.seed.unwrap_or(0));
        Ok(Server::new(hub, embeddings, ServerOptions::default()))
    }

    pub fn tcp_addr(&self) -> SocketAddr {
        SocketAddr::from(([0, 0, 0, 0], self.port.unwrap_or(7878)))
    }

    pub fn ws_addr(&self) -> SocketAddr {
        let port = self.ws_port.unwrap_or_else(|| match self.port.unwrap_or(7878) {
            0 => 0,
            p => p.wrapping_add(1),
        });
        SocketAddr::from(([0, 0, 0, 0], port))
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            tcp_addr: self.tcp_addr(),
            ws_addr: Some(self.ws_addr()),
            tick_interval: Duration::from_millis(100),
            kb_path: self.kb.clone(),
            profiles_path: self.profiles.clone(),
        }
    }
}

pub fn wall_clock_ms() -> Timestamp {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as Timestamp)
        .unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct NetConfig {
    pub tcp_addr: SocketAddr,
    pub ws_addr: Option<SocketAddr>,
    pub tick_interval: Duration,
    /// Where to persist the KB and profiles after each finished game.
    pub kb_path: Option<PathBuf>,
    pub profiles_path: Option<PathBuf>,
}

enum Command {
    Connect {
        tx: mpsc::UnboundedSender<String>,
        reply: oneshot::Sender<ConnId>,
    },
    Line {
        conn: ConnId,
        line: Vec<u8>,
    },
    Disconnect {
        conn: ConnId,
    },
    Shutdown,
}

pub struct RunningServer {
    pub tcp_addr: SocketAddr,
    pub ws_addr: Option<SocketAddr>,
    commands: mpsc::UnboundedSender<Command>,
    actor: JoinHandle<Server>,
}

impl RunningServer {
    /// Stops accepting work and returns the final server state.
    pub async fn shutdown(self) -> Server {
        let _ = self.commands.send(Command::Shutdown);
        self.actor.await.expect("server actor panicked")
    }
}

fn persist(server: &Server, cfg: &NetConfig) {
    if let Some(p) = &cfg.kb_path {
        if let Err(e) = server.hub().kb().save_path(p) {
            tracing::error!(error = %e, "saving knowledge base failed");
        }
    }
    if let Some(p) = &cfg.profiles_path {
        if let Err(e) = server.hub().profiles().save_path(p) {
            tracing::error!(error = %e, "saving profiles failed");
        }
    }
}

async fn actor(
    mut server: Server,
    cfg: NetConfig,
    mut commands: mpsc::UnboundedReceiver<Command>,
) -> Server {
    let mut conns: std::collections::HashMap<ConnId, mpsc::UnboundedSender<String>> = Default::default();
    let mut ticker = tokio::time::interval(cfg.tick_interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        let actions = tokio::select! {
            cmd = commands.recv() => match cmd {
                None | Some(Command::Shutdown) => break,
                Some(Command::Connect { tx, reply }) => {
                    let id = server.connect(wall_clock_ms());
                    conns.insert(id, tx);
                    let _ = reply.send(id);
                    Vec::new()
                }
                Some(Command::Line { conn, line }) => server.handle_line(conn, &line, wall_clock_ms()),
                Some(Command::Disconnect { conn }) => {
                    conns.remove(&conn);
                    server.disconnect(conn, wall_clock_ms());
                    Vec::new()
                }
            },
            _ = ticker.tick() => server.tick(wall_clock_ms()),
        };
        for action in actions {
            match action {
                Outbound::Send { conn, frame } => match encode_text(&frame) {
                    Ok(text) => {
                        if let Some(tx) = conns.get(&conn) {
                            let _ = tx.send(text);
                        }
                    }
                    Err(e) => tracing::error!(error = %e, "dropping unencodable message"),
                },
                Outbound::Close { conn } => {
                    conns.remove(&conn);
                }
            }
        }
        if server.take_dirty() {
            persist(&server, &cfg);
        }
    }
    persist(&server, &cfg);
    server
}

async fn register(commands: &mpsc::UnboundedSender<Command>) -> Option<(ConnId, mpsc::UnboundedReceiver<String>)> {
    let (tx, rx) = mpsc::unbounded_channel();
    let (reply_tx, reply_rx) = oneshot::channel();
    commands.send(Command::Connect { tx, reply: reply_tx }).ok()?;
    Some((reply_rx.await.ok()?, rx))
}

async fn serve_tcp(stream: TcpStream, commands: mpsc::UnboundedSender<Command>) {
    let Some((conn, mut outgoing)) = register(&commands).await else {
        return;
    };
    let (read, mut write) = stream.into_split();
    let writer = tokio::spawn(async move {
        while let Some(mut text) = outgoing.recv().await {
            text.push('\n');
            if write.write_all(text.as_bytes()).await.is_err() {
                break;
            }
        }
        let _ = write.shutdown().await;
    });
    let mut reader = BufReader::new(read);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        match (&mut reader).take(MAX_LINE_BYTES as u64 + 1).read_until(b'\n', &mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(_) => {
                if buf.len() > MAX_LINE_BYTES {
                    // Oversized line: report it and resynchronize at the next newline.
                    let _ = commands.send(Command::Line { conn, line: buf.clone() });
                    if !buf.ends_with(b"\n") {
                        let mut sink = Vec::new();
                        if reader.read_until(b'\n', &mut sink).await.unwrap_or(0) == 0 {
                            break;
                        }
                    }
                    continue;
                }
                if buf.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                if commands.send(Command::Line { conn, line: buf.clone() }).is_err() {
                    break;
                }
            }
        }
    }
    let _ = commands.send(Command::Disconnect { conn });
    writer.abort();
}

async fn serve_ws(stream: TcpStream, commands: mpsc::UnboundedSender<Command>) {
    let Ok(ws) = tokio_tungstenite::accept_async(stream).await else {
        return;
    };
    let Some((conn, mut outgoing)) = register(&commands).await else {
        return;
    };
    let (mut sink, mut source) = ws.split();
    let writer = tokio::spawn(async move {
        while let Some(text) = outgoing.recv().await {
            if sink.send(WsMessage::Text(text)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    while let Some(Ok(msg)) = source.next().await {
        let line = match msg {
            WsMessage::Text(t) => t.into_bytes(),
            WsMessage::Binary(b) => b,
            WsMessage::Close(_) => break,
            _ => continue,
        };
        if commands.send(Command::Line { conn, line }).is_err() {
            break;
        }
    }
    let _ = commands.send(Command::Disconnect { conn });
    writer.abort();
}

async fn accept_loop<F, Fut>(listener: TcpListener, commands: mpsc::UnboundedSender<Command>, handler: F)
where
    F: Fn(TcpStream, mpsc::UnboundedSender<Command>) -> Fut,
    Fut: std::future::Future<Output = ()> + Send + 'static,
{
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                if commands.is_closed() {
                    break;
                }
                tokio::spawn(handler(stream, commands.clone()));
            }
            Err(e) => tracing::warn!(error = %e, "accept failed"),
        }
    }
}

/// Binds the listeners and starts the actor. Port 0 picks a free port; the
/// bound addresses are reported in the result.
pub async fn spawn(server: Server, cfg: NetConfig) -> Result<RunningServer, NetError> {
    let tcp = TcpListener::bind(cfg.tcp_addr).await?;
    let tcp_addr = tcp.local_addr()?;
    let ws = match cfg.ws_addr {
        Some(a) => Some(TcpListener::bind(a).await?),
        None => None,
    };
    let ws_addr = ws.as_ref().map(TcpListener::local_addr).transpose()?;
    let (tx, rx) = mpsc::unbounded_channel();
    let actor = tokio::spawn(actor(server, cfg, rx));
    tokio::spawn(accept_loop(tcp, tx.clone(), serve_tcp));
    if let Some(ws) = ws {
        tokio::spawn(accept_loop(ws, tx.clone(), serve_ws));
    }
    Ok(RunningServer {
        tcp_addr,
        ws_addr,
        commands: tx,
        actor,
    })
}
