//! Stream messages. Every message is one JSON object carrying `v` and `type`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use elicit_core::elicitation::{FinalizeOutcome, Indicator, Phase};
use elicit_core::toyworld::WorldState;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    /// Velocity command `(dx, dy, grasp)` for the next tick.
    Action {
        action: Vec<f64>,
    },
    Begin,
    Finalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Tick {
        demo_index: usize,
        step: usize,
        t_ms: u64,
        world: WorldState,
    },
    Compat {
        demo_index: usize,
        step: usize,
        t_ms: u64,
        indicator: Indicator,
        score: f64,
        novelty: f64,
        likelihood: f64,
    },
    Phase {
        phase: Phase,
        demo_index: usize,
    },
    Decision {
        demo_index: usize,
        success: bool,
        outcome: FinalizeOutcome,
    },
    Error {
        code: String,
        message: String,
    },
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    v: u32,
    #[serde(flatten)]
    body: &'a T,
}

impl ServerMessage {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code: code.to_owned(),
            message: message.into(),
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(&Envelope {
            v: PROTOCOL_VERSION,
            body: self,
        })
        .expect("messages serialise")
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let body = strip_version(text)?;
        serde_json::from_value(body).map_err(|e| e.to_string())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServerMessage::Tick { .. } => "tick",
            ServerMessage::Compat { .. } => "compat",
            ServerMessage::Phase { .. } => "phase",
            ServerMessage::Decision { .. } => "decision",
            ServerMessage::Error { .. } => "error",
        }
    }
}

impl ClientMessage {
    pub fn to_text(&self) -> String {
        serde_json::to_string(&Envelope {
            v: PROTOCOL_VERSION,
            body: self,
        })
        .expect("messages serialise")
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let body = strip_version(text)?;
        serde_json::from_value(body).map_err(|e| e.to_string())
    }
}

fn strip_version(text: &str) -> Result<Value, String> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let obj = value.as_object_mut().ok_or("message must be a JSON object")?;
    match obj.remove("v").and_then(|v| v.as_u64()) {
        Some(v) if v == PROTOCOL_VERSION as u64 => Ok(value),
        Some(v) => Err(format!("unsupported protocol version {v}")),
        None => Err("missing protocol version field v".into()),
    }
}
