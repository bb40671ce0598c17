//! Wire protocol: one JSON object per line, tagged by `"type"`.
//!
//! Client and server speak different message sets, so a `"score"` line
//! decodes as a score request on the server and as a score reply on the
//! client. Every frame may carry a `"seq"` number; the server numbers its
//! outbound frames per connection starting at 1. Unknown fields are ignored,
//! unknown `"type"` tags and missing fields are decode errors.
//!
//! The same objects, without the trailing newline, travel one per text
//! frame over the WebSocket endpoint.

mod server;

pub use server::{ConnId, Outbound, Server, ServerOptions};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::kb::SlotType;
use crate::Timestamp;

/// Longest accepted line, in bytes, including the newline.
pub const MAX_LINE_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("decode error: {0}")]
    Decode(String),
    #[error("encode error: {0}")]
    Encode(String),
}

fn decode_err(reason: impl Into<String>) -> ProtocolError {
    ProtocolError::Decode(reason.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ClientMessage {
    #[serde(rename = "hello")]
    Hello {
        user_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        display_name: Option<String>,
    },
    #[serde(rename = "setup_interests")]
    SetupInterests { phrases: Vec<String> },
    #[serde(rename = "join")]
    JoinGame { category: String },
    #[serde(rename = "answer")]
    Answer {
        session_id: String,
        question_id: String,
        text: String,
    },
    #[serde(rename = "skip")]
    Skip { session_id: String, question_id: String },
    #[serde(rename = "more_time")]
    MoreTime { session_id: String },
    #[serde(rename = "score")]
    ScoreQuery {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session_id: Option<String>,
    },
    #[serde(rename = "badges")]
    BadgeList {},
    #[serde(rename = "ping")]
    Ping {},
    #[serde(rename = "pong")]
    Pong {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevealAnswer {
    pub user_id: String,
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevealConfidence {
    pub answer: String,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerTotal {
    pub user_id: String,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub user_id: String,
    pub points: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadgeEntry {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ServerMessage {
    #[serde(rename = "welcome")]
    Welcome {
        user_id: String,
        accuracy: f64,
        lifetime_points: f64,
    },
    #[serde(rename = "interests_ack")]
    InterestsAck { categories: Vec<String> },
    #[serde(rename = "lobby")]
    LobbyStatus { session_id: String, players: Vec<String> },
    #[serde(rename = "round_start")]
    RoundStart {
        session_id: String,
        round: u32,
        question_id: String,
        question_text: String,
        answer_slot: SlotType,
        deadline_ms: Timestamp,
    },
    #[serde(rename = "time_grant")]
    TimeGrant { deadline_ms: Timestamp },
    #[serde(rename = "denied")]
    Denied { reason: String },
    #[serde(rename = "reveal")]
    Reveal {
        session_id: String,
        round: u32,
        answers: Vec<RevealAnswer>,
        confidence: Vec<RevealConfidence>,
        winners: Vec<String>,
        points: Vec<PlayerTotal>,
    },
    #[serde(rename = "score")]
    Score { points: f64, accuracy: f64 },
    #[serde(rename = "badges")]
    Badges { badges: Vec<BadgeEntry> },
    #[serde(rename = "game_end")]
    GameEnd {
        session_id: String,
        ranking: Vec<RankEntry>,
        winner: Option<String>,
    },
    #[serde(rename = "error")]
    Error { reason: String },
    #[serde(rename = "ping")]
    Ping {},
    #[serde(rename = "pong")]
    Pong {},
}

impl ServerMessage {
    pub fn error(reason: impl Into<String>) -> Self {
        ServerMessage::Error { reason: reason.into() }
    }

    /// Session-scoped messages that every player of a session receives.
    pub fn is_broadcast(&self) -> bool {
        matches!(
            self,
            ServerMessage::LobbyStatus { .. }
                | ServerMessage::RoundStart { .. }
                | ServerMessage::Reveal { .. }
                | ServerMessage::GameEnd { .. }
        )
    }

    pub fn session_id(&self) -> Option<&str> {
        match self {
            ServerMessage::LobbyStatus { session_id, .. }
            | ServerMessage::RoundStart { session_id, .. }
            | ServerMessage::Reveal { session_id, .. }
            | ServerMessage::GameEnd { session_id, .. } => Some(session_id),
            _ => None,
        }
    }
}

/// Schema checks beyond what the type system enforces.
pub trait Validate {
    fn validate(&self) -> Result<(), String>;
}

fn nonempty(field: &str, v: &str) -> Result<(), String> {
    if v.is_empty() {
        Err(format!("`{field}` must not be empty"))
    } else {
        Ok(())
    }
}

fn finite(field: &str, v: f64) -> Result<(), String> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(format!("`{field}` must be a finite number"))
    }
}

impl Validate for ClientMessage {
    fn validate(&self) -> Result<(), String> {
        match self {
            ClientMessage::Hello { user_id, .. } => nonempty("user_id", user_id),
            ClientMessage::JoinGame { category } => nonempty("category", category),
            ClientMessage::Answer {
                session_id,
                question_id,
                ..
            }
            | ClientMessage::Skip {
                session_id,
                question_id,
            } => {
                nonempty("session_id", session_id)?;
                nonempty("question_id", question_id)
            }
            ClientMessage::MoreTime { session_id } => nonempty("session_id", session_id),
            _ => Ok(()),
        }
    }
}

impl Validate for ServerMessage {
    fn validate(&self) -> Result<(), String> {
        match self {
            ServerMessage::Welcome {
                user_id,
                accuracy,
                lifetime_points,
            } => {
                nonempty("user_id", user_id)?;
                finite("accuracy", *accuracy)?;
                finite("lifetime_points", *lifetime_points)
            }
            ServerMessage::LobbyStatus { session_id, .. }
            | ServerMessage::GameEnd { session_id, .. } => nonempty("session_id", session_id),
            ServerMessage::RoundStart {
                session_id,
                question_id,
                ..
            } => {
                nonempty("session_id", session_id)?;
                nonempty("question_id", question_id)
            }
            ServerMessage::Reveal {
                session_id,
                confidence,
                points,
                ..
            } => {
                nonempty("session_id", session_id)?;
                for c in confidence {
                    if !(0.0..=1.0).contains(&c.c) {
                        return Err(format!("confidence {} outside [0, 1]", c.c));
                    }
                }
                points.iter().try_for_each(|p| finite("total", p.total))
            }
            ServerMessage::Score { points, accuracy } => {
                finite("points", *points)?;
                finite("accuracy", *accuracy)
            }
            _ => Ok(()),
        }
    }
}

/// A message plus its optional per-connection sequence number.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    pub seq: Option<u64>,
    pub body: T,
}

impl<T> Frame<T> {
    pub fn new(body: T) -> Self {
        Self { seq: None, body }
    }

    pub fn with_seq(seq: u64, body: T) -> Self {
        Self { seq: Some(seq), body }
    }
}

/// Encodes one frame as a single JSON line terminated by `\n`.
pub fn encode_message<T: Serialize + Validate>(frame: &Frame<T>) -> Result<Vec<u8>, ProtocolError> {
    let mut line = encode_text(frame)?.into_bytes();
    line.push(b'\n');
    Ok(line)
}

/// The JSON object of a frame without a line terminator, as sent in one
/// WebSocket text frame.
pub fn encode_text<T: Serialize + Validate>(frame: &Frame<T>) -> Result<String, ProtocolError> {
    frame.body.validate().map_err(ProtocolError::Encode)?;
    let mut value = serde_json::to_value(&frame.body).map_err(|e| ProtocolError::Encode(e.to_string()))?;
    if let (Some(seq), Value::Object(map)) = (frame.seq, &mut value) {
        map.insert("seq".into(), Value::from(seq));
    }
    // serde_json escapes control characters, so the text has no raw newline.
    serde_json::to_string(&value).map_err(|e| ProtocolError::Encode(e.to_string()))
}

/// Decodes one line (with or without its terminator) into a frame.
pub fn decode_message<T: DeserializeOwned + Validate>(line: &[u8]) -> Result<Frame<T>, ProtocolError> {
    if line.len() > MAX_LINE_BYTES {
        return Err(decode_err(format!("line longer than {MAX_LINE_BYTES} bytes")));
    }
    let text = std::str::from_utf8(line).map_err(|e| decode_err(format!("invalid UTF-8: {e}")))?;
    let text = text.strip_suffix('\n').unwrap_or(text);
    let text = text.strip_suffix('\r').unwrap_or(text);
    if text.contains('\n') {
        return Err(decode_err("more than one line"));
    }
    let mut value: Value = serde_json::from_str(text).map_err(|e| decode_err(format!("malformed JSON: {e}")))?;
    let Value::Object(map) = &mut value else {
        return Err(decode_err("expected a JSON object"));
    };
    if !map.contains_key("type") {
        return Err(decode_err("missing field `type`"));
    }
    let seq = match map.remove("seq") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| decode_err("`seq` must be a non-negative integer"))?),
    };
    let body: T = serde_json::from_value(value).map_err(|e| decode_err(e.to_string()))?;
    body.validate().map_err(ProtocolError::Decode)?;
    Ok(Frame { seq, body })
}

pub fn decode_client(line: &[u8]) -> Result<Frame<ClientMessage>, ProtocolError> {
    decode_message(line)
}

pub fn decode_server(line: &[u8]) -> Result<Frame<ServerMessage>, ProtocolError> {
    decode_message(line)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ping_is_one_line() {
        let line = encode_message(&Frame::new(ClientMessage::Ping {})).unwrap();
        assert_eq!(line, b"{\"type\":\"ping\"}\n");
    }

    #[test]
    fn newline_in_text_is_escaped() {
        let msg = ServerMessage::RoundStart {
            session_id: "s1".into(),
            round: 1,
            question_id: "s1-q1".into(),
            question_text: "What is the rank\nof Dana Whitfield?".into(),
            answer_slot: SlotType::Text,
            deadline_ms: 120_000,
        };
        let line = encode_message(&Frame::with_seq(3, msg.clone())).unwrap();
        let pieces: Vec<&[u8]> = line.split(|b| *b == b'\n').collect();
        assert_eq!(pieces.len(), 2);
        assert!(pieces[1].is_empty());
        let back = decode_server(&line).unwrap();
        assert_eq!(back.seq, Some(3));
        assert_eq!(back.body, msg);
    }

    #[test]
    fn decode_join() {
        let f = decode_client(br#"{"type":"join","category":"faculty"}"#).unwrap();
        assert_eq!(f.body, ClientMessage::JoinGame { category: "faculty".into() });
        assert_eq!(f.seq, None);
    }

    #[test]
    fn truncated_line_fails() {
        let err = decode_client(br#"{"type":"join","categ"#).unwrap_err();
        assert!(matches!(err, ProtocolError::Decode(ref r) if r.contains("malformed")), "{err}");
    }

    #[test]
    fn extra_fields_are_dropped() {
        let f = decode_client(br#"{"type":"join","category":"faculty","x":1}"#).unwrap();
        assert_eq!(f.body, ClientMessage::JoinGame { category: "faculty".into() });
        let f = decode_client(br#"{"type":"badges","x":[1,2]}"#).unwrap();
        assert_eq!(f.body, ClientMessage::BadgeList {});
    }

    #[test]
    fn unknown_type_and_missing_field_fail() {
        let err = decode_client(br#"{"type":"teleport"}"#).unwrap_err();
        assert!(err.to_string().contains("teleport"), "{err}");
        let err = decode_client(br#"{"type":"answer","session_id":"s1","text":"full"}"#).unwrap_err();
        assert!(err.to_string().contains("question_id"), "{err}");
        let err = decode_client(br#"{"category":"faculty"}"#).unwrap_err();
        assert!(err.to_string().contains("type"), "{err}");
        assert!(decode_client(b"[1,2]").is_err());
        assert!(decode_client(br#"{"type":"hello","user_id":""}"#).is_err());
        assert!(decode_client(br#"{"type":"ping","seq":-1}"#).is_err());
    }

    #[test]
    fn direction_specific_tags() {
        let q = decode_client(br#"{"type":"score"}"#).unwrap();
        assert_eq!(q.body, ClientMessage::ScoreQuery { session_id: None });
        let r = decode_server(br#"{"type":"score","points":5,"accuracy":1.3}"#).unwrap();
        assert_eq!(r.body, ServerMessage::Score { points: 5.0, accuracy: 1.3 });
        assert!(decode_server(br#"{"type":"score"}"#).is_err());
    }

    #[test]
    fn invalid_payload_does_not_encode() {
        let bad = ServerMessage::Score {
            points: f64::NAN,
            accuracy: 0.5,
        };
        assert!(matches!(encode_message(&Frame::new(bad)), Err(ProtocolError::Encode(_))));
        let bad = ServerMessage::Reveal {
            session_id: "s".into(),
            round: 1,
            answers: vec![],
            confidence: vec![RevealConfidence { answer: "a".into(), c: 1.5 }],
            winners: vec![],
            points: vec![],
        };
        assert!(encode_message(&Frame::new(bad)).is_err());
    }

    #[test]
    fn reveal_null_answer() {
        let msg = ServerMessage::Reveal {
            session_id: "s1".into(),
            round: 2,
            answers: vec![RevealAnswer {
                user_id: "a".into(),
                answer: None,
            }],
            confidence: vec![],
            winners: vec![],
            points: vec![PlayerTotal {
                user_id: "a".into(),
                total: 0.0,
            }],
        };
        let text = encode_text(&Frame::new(msg)).unwrap();
        assert!(text.contains(r#""answer":null"#), "{text}");
        assert!(text.starts_with(r#"{"type":"reveal""#));
    }
}
