//! Device naming, command payloads and error codes shared by the station and
//! the network server.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `domain/family/member`, each segment `[a-z0-9_-]+`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DeviceName(String);

impl DeviceName {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

fn valid_segment(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

impl FromStr for DeviceName {
    type Err = DeviceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 3 || !parts.iter().all(|p| valid_segment(p)) {
            return Err(DeviceError::InvalidName(s.to_string()));
        }
        Ok(DeviceName(s.to_string()))
    }
}

impl TryFrom<String> for DeviceName {
    type Error = DeviceError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DeviceName> for String {
    fn from(n: DeviceName) -> String {
        n.0
    }
}

impl fmt::Display for DeviceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Command argument or result. On the wire: `null`, an integer, a list of
/// integers, a string, or (for structured results) any other JSON value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(untagged)]
pub enum Payload {
    #[default]
    None,
    Int(i64),
    IntList(Vec<i64>),
    Str(String),
    Json(serde_json::Value),
}

impl Payload {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Payload::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_ints(&self) -> Option<&[i64]> {
        match self {
            Payload::IntList(v) => Some(v),
            _ => None,
        }
    }

    /// An integer or list of integers, as a list.
    pub fn int_args(&self) -> Option<Vec<i64>> {
        match self {
            Payload::Int(v) => Some(vec![*v]),
            Payload::IntList(v) => Some(v.clone()),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Payload::Str(s) => Some(s),
            _ => None,
        }
    }

    /// Wraps any serializable value; never fails for the types used here.
    pub fn json<T: Serialize>(value: &T) -> Payload {
        match serde_json::to_value(value) {
            Ok(v) => serde_json::from_value(v).unwrap_or(Payload::None),
            Err(_) => Payload::None,
        }
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::Str(s) => f.write_str(s),
            other => write!(f, "{}", serde_json::to_string(other).map_err(|_| fmt::Error)?),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArgKind {
    None,
    Int,
    IntList,
    Str,
    /// Null or an integer.
    OptInt,
    /// An integer or a list of integers.
    IntOrList,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandDescriptor {
    pub name: String,
    pub arg: ArgKind,
    pub doc: String,
}

impl CommandDescriptor {
    pub fn new(name: &str, arg: ArgKind, doc: &str) -> Self {
        CommandDescriptor { name: name.into(), arg, doc: doc.into() }
    }

    pub fn accepts(&self, p: &Payload) -> bool {
        matches!(
            (self.arg, p),
            (ArgKind::None, Payload::None)
                | (ArgKind::Int, Payload::Int(_))
                | (ArgKind::IntList, Payload::IntList(_))
                | (ArgKind::Str, Payload::Str(_))
                | (ArgKind::OptInt, Payload::None | Payload::Int(_))
                | (ArgKind::IntOrList, Payload::Int(_) | Payload::IntList(_))
        )
    }
}

/// Something a client can subscribe to: `state`, `value:<channel>` or `hook:<id>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventName {
    State,
    Value(String),
    Hook(u32),
}

impl FromStr for EventName {
    type Err = DeviceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DeviceError::UnknownEvent(s.to_string());
        match s.split_once(':') {
            None if s == "state" => Ok(EventName::State),
            Some(("value", ch)) if !ch.is_empty() => Ok(EventName::Value(ch.to_string())),
            Some(("hook", id)) => id.parse().map(EventName::Hook).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for EventName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventName::State => f.write_str("state"),
            EventName::Value(ch) => write!(f, "value:{ch}"),
            EventName::Hook(id) => write!(f, "hook:{id}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("invalid device name {0:?}")]
    InvalidName(String),
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("device {device} has no command {command}")]
    UnknownCommand { device: String, command: String },
    #[error("bad payload for {command}: {reason}")]
    BadPayload { command: String, reason: String },
    #[error("unknown event {0:?}")]
    UnknownEvent(String),
    #[error("{code}: {message}")]
    Failed { code: String, message: String },
}

impl DeviceError {
    pub fn code(&self) -> &str {
        match self {
            DeviceError::InvalidName(_) => "invalid-name",
            DeviceError::UnknownDevice(_) => "unknown-device",
            DeviceError::UnknownCommand { .. } => "unknown-command",
            DeviceError::BadPayload { .. } => "bad-payload",
            DeviceError::UnknownEvent(_) => "unknown-event",
            DeviceError::Failed { code, .. } => code,
        }
    }

    pub fn failed(code: &str, message: impl fmt::Display) -> Self {
        DeviceError::Failed { code: code.to_string(), message: message.to_string() }
    }

    pub fn bad_payload(command: &str, reason: impl Into<String>) -> Self {
        DeviceError::BadPayload { command: command.to_string(), reason: reason.into() }
    }
}
