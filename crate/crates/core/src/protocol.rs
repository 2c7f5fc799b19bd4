//! Wire messages between coordinator and workers.
//!
//! Each message is one JSON object on a single line, carried in one WebSocket
//! text frame. The `"type"` field names the variant. Decoding validates every
//! field before building the message so a bad frame is reported by field name
//! rather than by byte offset.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// WebSocket path served by the coordinator.
pub const VOLUNTEER_PATH: &str = "/volunteer";

/// Names the map function and its fixed parameters for a job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub processor: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

impl TaskSpec {
    pub fn new(processor: impl Into<String>) -> Self {
        Self {
            processor: processor.into(),
            params: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaseItem {
    pub index: u64,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Message {
    Hello {
        agent: String,
        cores: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        worker_id: Option<String>,
    },
    Welcome {
        worker_id: String,
        task: TaskSpec,
        window: u32,
    },
    Lease {
        lease_id: String,
        items: Vec<LeaseItem>,
    },
    Result {
        lease_id: String,
        index: u64,
        value: Value,
        elapsed_ms: f64,
    },
    ItemError {
        lease_id: String,
        index: u64,
        message: String,
    },
    Ping {
        t: u64,
    },
    Pong {
        t: u64,
    },
    Bye {},
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::Welcome { .. } => "welcome",
            Message::Lease { .. } => "lease",
            Message::Result { .. } => "result",
            Message::ItemError { .. } => "item_error",
            Message::Ping { .. } => "ping",
            Message::Pong { .. } => "pong",
            Message::Bye {} => "bye",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("frame is not a JSON object")]
    NotAnObject,
    #[error("frame has no string \"type\" field")]
    MissingType,
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("{kind}: missing field {field:?}")]
    MissingField { kind: String, field: String },
    #[error("{kind}: unexpected field {field:?}")]
    UnexpectedField { kind: String, field: String },
    #[error("{kind}: invalid field {field:?}: {reason}")]
    InvalidField {
        kind: String,
        field: String,
        reason: String,
    },
}

#[derive(Clone, Copy)]
enum Kind {
    Text,
    PositiveInt,
    NonNegativeInt,
    NonNegativeNumber,
    Task,
    Items,
    Any,
}

struct Field {
    name: &'static str,
    kind: Kind,
    required: bool,
}

const fn req(name: &'static str, kind: Kind) -> Field {
    Field {
        name,
        kind,
        required: true,
    }
}

fn schema(kind: &str) -> Option<&'static [Field]> {
    const HELLO: &[Field] = &[
        req("agent", Kind::Text),
        req("cores", Kind::PositiveInt),
        Field {
            name: "worker_id",
            kind: Kind::Text,
            required: false,
        },
    ];
    const WELCOME: &[Field] = &[
        req("worker_id", Kind::Text),
        req("task", Kind::Task),
        req("window", Kind::PositiveInt),
    ];
    const LEASE: &[Field] = &[req("lease_id", Kind::Text), req("items", Kind::Items)];
    const RESULT: &[Field] = &[
        req("lease_id", Kind::Text),
        req("index", Kind::NonNegativeInt),
        req("value", Kind::Any),
        req("elapsed_ms", Kind::NonNegativeNumber),
    ];
    const ITEM_ERROR: &[Field] = &[
        req("lease_id", Kind::Text),
        req("index", Kind::NonNegativeInt),
        req("message", Kind::Text),
    ];
    const CLOCK: &[Field] = &[req("t", Kind::NonNegativeInt)];
    const BYE: &[Field] = &[];
    Some(match kind {
        "hello" => HELLO,
        "welcome" => WELCOME,
        "lease" => LEASE,
        "result" => RESULT,
        "item_error" => ITEM_ERROR,
        "ping" | "pong" => CLOCK,
        "bye" => BYE,
        _ => return None,
    })
}

fn check_field(kind: &str, field: &str, expected: Kind, value: &Value) -> Result<(), ProtocolError> {
    let invalid = |reason: &str| ProtocolError::InvalidField {
        kind: kind.to_owned(),
        field: field.to_owned(),
        reason: reason.to_owned(),
    };
    match expected {
        Kind::Text => {
            if !value.is_string() {
                return Err(invalid("expected a string"));
            }
        }
        Kind::PositiveInt => match value.as_u64() {
            Some(n) if n >= 1 && n <= u64::from(u32::MAX) => {}
            _ => return Err(invalid("expected a positive integer")),
        },
        Kind::NonNegativeInt => {
            if value.as_u64().is_none() {
                return Err(invalid("expected a non-negative integer"));
            }
        }
        Kind::NonNegativeNumber => match value.as_f64() {
            Some(x) if x >= 0.0 && x.is_finite() => {}
            _ => return Err(invalid("expected a non-negative number")),
        },
        Kind::Task => {
            let task = value.as_object().ok_or_else(|| invalid("expected an object"))?;
            match task.get("processor").and_then(Value::as_str) {
                Some(name) if !name.is_empty() => {}
                _ => return Err(invalid("processor must be a non-empty string")),
            }
            if let Some(params) = task.get("params") {
                if !params.is_object() {
                    return Err(invalid("params must be an object"));
                }
            }
            if let Some(extra) = task.keys().find(|k| *k != "processor" && *k != "params") {
                return Err(invalid(&format!("unexpected key {extra:?}")));
            }
        }
        Kind::Items => {
            let items = value.as_array().ok_or_else(|| invalid("expected an array"))?;
            if items.is_empty() {
                return Err(invalid("a lease carries at least one item"));
            }
            for item in items {
                let ok = item.as_object().is_some_and(|obj| {
                    obj.len() == 2 && obj.get("index").and_then(Value::as_u64).is_some() && obj.contains_key("value")
                });
                if !ok {
                    return Err(invalid("items must be {index, value} objects"));
                }
            }
        }
        Kind::Any => {}
    }
    Ok(())
}

pub fn encode_message(message: &Message) -> String {
    // Serialization of these types cannot fail: all map keys are strings.
    serde_json::to_string(message).expect("message serializes")
}

pub fn decode_message(frame: &str) -> Result<Message, ProtocolError> {
    let value: Value = serde_json::from_str(frame).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let object = value.as_object().ok_or(ProtocolError::NotAnObject)?;
    let kind = object
        .get("type")
        .and_then(Value::as_str)
        .ok_or(ProtocolError::MissingType)?;
    let fields = schema(kind).ok_or_else(|| ProtocolError::UnknownType(kind.to_owned()))?;

    for key in object.keys() {
        if key != "type" && !fields.iter().any(|f| f.name == key) {
            return Err(ProtocolError::UnexpectedField {
                kind: kind.to_owned(),
                field: key.clone(),
            });
        }
    }
    for field in fields {
        match object.get(field.name) {
            Some(v) => check_field(kind, field.name, field.kind, v)?,
            None if field.required => {
                return Err(ProtocolError::MissingField {
                    kind: kind.to_owned(),
                    field: field.name.to_owned(),
                })
            }
            None => {}
        }
    }
    serde_json::from_value(value).map_err(|e| ProtocolError::Malformed(e.to_string()))
}
