use serde_json::Value;
use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use crate::message::{read_message, write_message, ControlMessage, WireError};

/// Blocking full-duplex client. Unsolicited messages (frames, logs) that
/// arrive while waiting for a reply are kept for [`Client::next_unsolicited`].
pub struct Client {
    stream: TcpStream,
    next_id: u64,
    pending: VecDeque<ControlMessage>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream, next_id: 1, pending: VecDeque::new() })
    }

    pub fn set_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(t)
    }

    /// Send a command and return its id.
    pub fn send(&mut self, kind: &str, body: Value) -> io::Result<u64> {
        let id = self.next_id;
        self.next_id += 1;
        write_message(&mut self.stream, &ControlMessage::new(id, kind, body))?;
        Ok(id)
    }

    pub fn recv(&mut self) -> Result<ControlMessage, WireError> {
        read_message(&mut self.stream)?.ok_or_else(|| WireError::Io(io::ErrorKind::UnexpectedEof.into()))
    }

    /// Send a command and wait for the reply carrying its id.
    pub fn request(&mut self, kind: &str, body: Value) -> Result<ControlMessage, WireError> {
        let id = self.send(kind, body)?;
        loop {
            let m = self.recv()?;
            if m.id == id {
                return Ok(m);
            }
            self.pending.push_back(m);
        }
    }

    /// Next frame or log, buffered or fresh.
    pub fn next_unsolicited(&mut self) -> Result<ControlMessage, WireError> {
        match self.pending.pop_front() {
            Some(m) => Ok(m),
            None => self.recv(),
        }
    }

    /// Raw access for protocol tests.
    pub fn stream(&mut self) -> &mut TcpStream {
        &mut self.stream
    }
}

/// One-shot HTTP request against `POST /command`.
pub fn http_command(addr: impl ToSocketAddrs, msg: &ControlMessage) -> Result<ControlMessage, WireError> {
    let mut s = TcpStream::connect(addr)?;
    let body = msg.to_bytes();
    let head = format!("POST /command HTTP/1.1\r\nHost: virtlab\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len());
    s.write_all(head.as_bytes())?;
    s.write_all(&body)?;
    let mut raw = Vec::new();
    s.read_to_end(&mut raw)?;
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").ok_or_else(|| WireError::Malformed("no HTTP header".into()))?;
    crate::message::parse_message(&raw[split + 4..])
}
