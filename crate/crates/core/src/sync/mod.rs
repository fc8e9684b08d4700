//! Policy distribution: a server holding versioned ruleset images per
//! group and an agent that pulls them into a running engine and reports
//! counters back. Messages are single-line JSON objects separated by LF.

mod agent;
mod server;

use std::io::{self, BufRead, Write};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::StatsSnapshot;
use crate::ruleset::RulesetError;

pub use agent::{Agent, AgentConfig, Backoff, SyncOutcome};
pub use server::{
    AgentRecord, AgentSummary, FleetSummary, GroupState, PolicyServer, PublishedImage, ServerHandle, ServerState,
};

pub const BAD_FRAME: &str = "BAD_FRAME";
pub const UNKNOWN_KIND: &str = "UNKNOWN_KIND";
pub const GROUP_NOT_FOUND: &str = "GROUP_NOT_FOUND";
pub const AGENT_UNKNOWN: &str = "AGENT_UNKNOWN";
pub const INVALID_IMAGE: &str = "INVALID_IMAGE";
pub const DIGEST_MISMATCH: &str = "DIGEST_MISMATCH";
pub const BAD_REQUEST: &str = "BAD_REQUEST";

pub const KINDS: [&str; 6] = ["HELLO", "PULL", "RULESET", "STATS_REPORT", "ACK", "ERROR"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyMessage {
    Hello {
        agent_id: String,
        group_id: String,
        platform: String,
        #[serde(default)]
        have_version: u64,
    },
    Pull {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        agent_id: Option<String>,
        group_id: String,
        have_version: u64,
    },
    /// Sent by the server in answer to PULL, and by an administrator to
    /// publish (the server then assigns the version).
    Ruleset {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        group_id: Option<String>,
        #[serde(default)]
        version: u64,
        image: String,
        digest: String,
        /// Reserved for a detached signature; never checked.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sig: Option<String>,
    },
    StatsReport {
        agent_id: String,
        stats: StatsSnapshot,
        version: u64,
    },
    Ack {
        #[serde(rename = "ref")]
        ref_kind: String,
        status: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        version: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        agent_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        group_id: Option<String>,
    },
    Error {
        code: String,
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        agent_id: Option<String>,
    },
}

impl PolicyMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            PolicyMessage::Hello { .. } => "HELLO",
            PolicyMessage::Pull { .. } => "PULL",
            PolicyMessage::Ruleset { .. } => "RULESET",
            PolicyMessage::StatsReport { .. } => "STATS_REPORT",
            PolicyMessage::Ack { .. } => "ACK",
            PolicyMessage::Error { .. } => "ERROR",
        }
    }

    pub fn ack(ref_kind: &str, status: &str) -> PolicyMessage {
        PolicyMessage::Ack {
            ref_kind: ref_kind.to_string(),
            status: status.to_string(),
            version: None,
            agent_id: None,
            group_id: None,
        }
    }

    pub fn error(code: &str, text: impl Into<String>) -> PolicyMessage {
        PolicyMessage::Error { code: code.to_string(), text: text.into(), agent_id: None }
    }

    /// A RULESET message carrying `image` as published content.
    pub fn ruleset(group_id: Option<&str>, version: u64, image: &str) -> PolicyMessage {
        PolicyMessage::Ruleset {
            group_id: group_id.map(str::to_string),
            version,
            image: encode_image(image),
            digest: crate::ruleset::image_digest(image).to_hex(),
            sig: None,
        }
    }

    /// Serialised form without the trailing LF.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("messages always serialise")
    }
}

/// Why an incoming line could not be turned into a message. Carries the
/// ERROR code to answer with.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{code}: {text}")]
pub struct FrameError {
    pub code: &'static str,
    pub text: String,
}

/// Parses one line. Unknown kinds are distinguished from malformed frames.
pub fn decode_line(line: &str) -> Result<PolicyMessage, FrameError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| FrameError { code: BAD_FRAME, text: e.to_string() })?;
    let kind = value
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| FrameError { code: BAD_FRAME, text: "missing string field `kind`".into() })?;
    if !KINDS.contains(&kind) {
        return Err(FrameError { code: UNKNOWN_KIND, text: format!("unknown kind `{kind}`") });
    }
    serde_json::from_value(value).map_err(|e| FrameError { code: BAD_FRAME, text: e.to_string() })
}

pub fn encode_image(text: &str) -> String {
    base64::engine::general_purpose::STANDARD.encode(text.as_bytes())
}

pub fn decode_image(b64: &str) -> Result<String, SyncError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| SyncError::Image(format!("base64: {e}")))?;
    String::from_utf8(bytes).map_err(|_| SyncError::Image("image is not UTF-8".into()))
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad frame from peer: {0}")]
    Frame(#[from] FrameError),
    #[error("connection closed by peer")]
    Closed,
    #[error("server error {code}: {text}")]
    Remote { code: String, text: String },
    #[error("unexpected {got} reply to {sent}")]
    Unexpected { sent: &'static str, got: &'static str },
    #[error("digest mismatch: declared {declared}, computed {actual}")]
    Digest { declared: String, actual: String },
    #[error("image: {0}")]
    Image(String),
    #[error("ruleset: {0}")]
    Ruleset(#[from] RulesetError),
    #[error("image declares version {image} but message carries {message}")]
    VersionMismatch { image: u64, message: u64 },
    #[error("group `{0}` not found")]
    GroupNotFound(String),
    #[error("invalid group id `{0}`")]
    BadGroupId(String),
    #[error("persistence: {0}")]
    Persist(String),
}

/// Writes one message and its LF.
pub fn write_message<W: Write>(w: &mut W, msg: &PolicyMessage) -> io::Result<()> {
    let mut line = msg.to_line();
    line.push('\n');
    w.write_all(line.as_bytes())?;
    w.flush()
}

/// Reads one message, or `Closed` at end of stream.
pub fn read_message<R: BufRead>(r: &mut R) -> Result<PolicyMessage, SyncError> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(SyncError::Closed);
    }
    Ok(decode_line(&line)?)
}
