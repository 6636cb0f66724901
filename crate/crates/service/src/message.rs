//! Wire format: every message is a 4-byte big-endian length followed by one
//! UTF-8 JSON object `{id, kind, body}`.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::io::{self, Read, Write};
use thiserror::Error;
use virtlab_core::engine::Frame;

/// Largest accepted message payload (bytes).
pub const MAX_MESSAGE: usize = 16 << 20;

/// Every message kind the protocol knows.
pub const KINDS: [&str; 12] = [
    "list_protocols",
    "get_config",
    "set_params",
    "start",
    "stop",
    "pause",
    "resume",
    "status",
    "subscribe",
    "frame",
    "log",
    "error",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlMessage {
    /// Correlation id. Replies reuse the command's id; unsolicited messages use 0.
    pub id: u64,
    pub kind: String,
    #[serde(default)]
    pub body: Value,
}

impl ControlMessage {
    pub fn new(id: u64, kind: &str, body: Value) -> Self {
        Self { id, kind: kind.into(), body }
    }

    pub fn error(id: u64, code: &str, message: impl Into<String>) -> Self {
        Self::new(id, "error", json!({ "code": code, "message": message.into() }))
    }

    pub fn is_error(&self) -> bool {
        self.kind == "error"
    }

    /// `code` of an error message.
    pub fn error_code(&self) -> Option<&str> {
        if !self.is_error() {
            return None;
        }
        self.body.get("code").and_then(Value::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("message serializes")
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("message of {0} bytes exceeds the {MAX_MESSAGE} byte limit")]
    TooLarge(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
}

pub fn write_message(w: &mut impl Write, m: &ControlMessage) -> io::Result<()> {
    let bytes = m.to_bytes();
    let mut buf = Vec::with_capacity(bytes.len() + 4);
    buf.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    buf.extend_from_slice(&bytes);
    w.write_all(&buf)?;
    w.flush()
}

/// Next raw payload, or `None` at a clean end of stream.
pub fn read_payload(r: &mut impl Read) -> Result<Option<Vec<u8>>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_MESSAGE {
        return Err(WireError::TooLarge(n));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn parse_message(payload: &[u8]) -> Result<ControlMessage, WireError> {
    serde_json::from_slice(payload).map_err(|e| WireError::Malformed(e.to_string()))
}

pub fn read_message(r: &mut impl Read) -> Result<Option<ControlMessage>, WireError> {
    read_payload(r)?.map(|p| parse_message(&p)).transpose()
}

/// Live partial as an unsolicited `frame` message.
pub fn encode_frame(frame: &Frame) -> ControlMessage {
    ControlMessage::new(0, "frame", serde_json::to_value(frame).expect("frame serializes"))
}

pub fn decode_frame(m: &ControlMessage) -> Result<Frame, WireError> {
    if m.kind != "frame" {
        return Err(WireError::Malformed(format!("expected a frame, got {}", m.kind)));
    }
    serde_json::from_value(m.body.clone()).map_err(|e| WireError::Malformed(e.to_string()))
}

pub fn heartbeat(status: Value) -> ControlMessage {
    ControlMessage::new(0, "frame", json!({ "heartbeat": true, "status": status }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use virtlab_core::engine::Partial;

    #[test]
    fn framing_round_trip() {
        let m = ControlMessage::new(7, "status", json!({}));
        let mut buf = Vec::new();
        write_message(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], &(buf.len() as u32 - 4).to_be_bytes());
        let mut r = &buf[..];
        assert_eq!(read_message(&mut r).unwrap(), Some(m));
        assert!(read_message(&mut r).unwrap().is_none());
    }

    #[test]
    fn oversize_refused() {
        let len = (MAX_MESSAGE as u32 + 1).to_be_bytes();
        assert!(matches!(read_payload(&mut &len[..]), Err(WireError::TooLarge(_))));
    }

    #[test]
    fn frames_round_trip_exactly() {
        let freqs: Vec<f64> = (0..50).map(|k| 2.8e9 + k as f64 * 1.234567891234e5).collect();
        let contrast: Vec<f64> = (0..50).map(|k| 1.0 - 1.0 / (3.0 + k as f64)).collect();
        let frames = [
            Frame { run_id: 3, seq: 1, partial: Partial::Spectrum { freqs, contrast, sweep: 2 } },
            Frame {
                run_id: 3,
                seq: 2,
                partial: Partial::Pulsed { params: vec![1e-9, 2e-9], signal: vec![0.1, 0.3], alternate: vec![], snr: Some(12.5), repetition: 9 },
            },
            Frame { run_id: 4, seq: 1, partial: Partial::ScanRow { row: 0, values: vec![] } },
        ];
        for f in frames {
            let m = encode_frame(&f);
            let back = parse_message(&m.to_bytes()).unwrap();
            assert_eq!(decode_frame(&back).unwrap(), f);
        }
    }

    #[test]
    fn empty_partial_is_valid() {
        let f = Frame { run_id: 1, seq: 1, partial: Partial::Spectrum { freqs: vec![], contrast: vec![], sweep: 0 } };
        let m = encode_frame(&f);
        assert_eq!(m.body["partial"]["freqs"], json!([]));
        assert_eq!(decode_frame(&m).unwrap(), f);
    }
}
