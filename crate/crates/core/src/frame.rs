//! Wire frames of the device protocol.
//!
//! Every frame is a JSON object tagged by `kind`, sent with a 4-byte
//! big-endian length prefix. The gateway carries the same JSON objects as
//! WebSocket text messages, without the prefix.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::Payload;

pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Ok {
        #[serde(default)]
        payload: Payload,
    },
    Err {
        code: String,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Frame {
    // client to server
    Sync {
        id: u64,
        device: String,
        command: String,
        #[serde(default)]
        payload: Payload,
    },
    Async {
        id: u64,
        device: String,
        command: String,
        #[serde(default)]
        payload: Payload,
    },
    Subscribe {
        id: u64,
        device: String,
        event: String,
    },
    Unsubscribe {
        id: u64,
        subscription: u64,
    },
    Describe {
        id: u64,
        device: String,
    },

    // server to client
    Reply {
        id: u64,
        #[serde(default)]
        payload: Payload,
    },
    Error {
        /// Absent when the offending frame could not be parsed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        code: String,
        message: String,
    },
    Ack {
        id: u64,
        ticket: u64,
    },
    Completion {
        ticket: u64,
        outcome: Outcome,
    },
    Subscribed {
        id: u64,
        subscription: u64,
    },
    Event {
        subscription: u64,
        seq: u64,
        payload: Payload,
    },
    /// Terminal frame of a subscription, e.g. `overflow`.
    Closed {
        subscription: u64,
        code: String,
    },
}

impl Frame {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }

    pub fn from_json(text: &str) -> Result<Frame, FrameError> {
        serde_json::from_str(text).map_err(|e| FrameError::Malformed(e.to_string()))
    }

    /// Length-prefixed bytes.
    pub fn encode(&self) -> Vec<u8> {
        let body = self.to_json().into_bytes();
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn error(id: Option<u64>, code: &str, message: impl ToString) -> Frame {
        Frame::Error { id, code: code.to_string(), message: message.to_string() }
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FrameError {
    pub fn code(&self) -> &'static str {
        match self {
            FrameError::Malformed(_) => "bad-frame",
            FrameError::TooLarge(_) => "frame-too-large",
            FrameError::Io(_) => "io",
        }
    }
}

pub fn check_len(len: u32) -> Result<usize, FrameError> {
    let len = len as usize;
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len));
    }
    Ok(len)
}

/// Blocking read of one frame; `Ok(None)` on clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, FrameError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = check_len(u32::from_be_bytes(len))?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let text = std::str::from_utf8(&body).map_err(|e| FrameError::Malformed(e.to_string()))?;
    Frame::from_json(text).map(Some)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), FrameError> {
    w.write_all(&frame.encode())?;
    w.flush()?;
    Ok(())
}
