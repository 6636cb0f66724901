//! Control plane for the virtual lab.
//!
//! One TCP port carries two transports. Full-duplex connections exchange
//! length-prefixed JSON [`ControlMessage`]s and may subscribe to live frames.
//! Plain HTTP on the same port answers one-shot `POST /command` requests and
//! serves static operator UI assets. See `docs/protocol.md`.

mod client;
mod http;
pub mod message;
mod server;

pub use client::{http_command, Client};
pub use message::{decode_frame, encode_frame, ControlMessage, WireError};
pub use server::{serve, ServeOptions, Service, ServiceError};
