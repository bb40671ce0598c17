//! DataPop: knowledge-base population through synchronized multiplayer
//! trivia.
//!
//! A coordination server groups players into game sessions. Every round
//! poses one question generated from a gap in the knowledge base (a cell
//! that is missing or has low confidence), or occasionally a probe question
//! whose answer is already known. Probe answers update each player's
//! cumulative accuracy; gap answers are fused into an accuracy-weighted
//! confidence table and committed back into the knowledge base once they
//! are confident enough.
//!
//! Module map:
//!
//! * [`kb`] - knowledge base schema, persistence, gap detection, write-back.
//! * [`query_gen`] - staged gap selection and template instantiation.
//! * [`scoring`] - answer normalization, probe accuracy, confidence fusion.
//! * [`profiles`] - user registry, interest classification, badges.
//! * [`session`] - the per-game state machine and matchmaking hub.
//! * [`protocol`] - newline-delimited JSON wire protocol and server core.
//! * [`net`] - TCP and WebSocket transports around the protocol core.
//! * [`sim`] - deterministic simulated players driving the real protocol.

pub mod kb;
pub mod net;
pub mod profiles;
pub mod protocol;
pub mod query_gen;
pub mod scoring;
pub mod session;
pub mod sim;

/// Milliseconds since the Unix epoch, or since the start of a virtual clock.
pub type Timestamp = u64;

pub use kb::{CellRef, KnowledgeBase, SlotType};
pub use protocol::{ClientMessage, Server, ServerMessage};
pub use scoring::{compute_confidence, AnswerRecord, ConfidenceTable, UserAccuracy};
pub use session::{GameHub, SessionConfig};
