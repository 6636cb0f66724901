//! One-shot request/reply transport on the same port: `POST /command` takes a
//! single JSON message and answers with its terminal reply; `GET` serves the
//! operator UI assets.

use std::io::Write;
use std::net::{Shutdown, TcpStream};
use std::path::{Component, Path};
use std::sync::Arc;
use std::time::Duration;

use crate::message::{parse_message, ControlMessage, MAX_MESSAGE};
use crate::server::{read_to_limit, respond, Shared};

const HEAD_LIMIT: usize = 64 * 1024;

const INDEX: &str = "<!doctype html>
<html><head><meta charset=\"utf-8\"><title>virtlab</title></head>
<body><h1>virtlab control service</h1>
<p>No operator UI assets are installed. Set <code>service.static_dir</code> to serve them.</p>
<p>Scripts can POST one JSON message to <code>/command</code>, for example
<code>{\"id\": 1, \"kind\": \"status\", \"body\": {}}</code>.</p>
</body></html>
";

fn reply(stream: &mut TcpStream, status: &str, ctype: &str, body: &[u8]) {
    let head = format!("HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len());
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(body);
    let _ = stream.flush();
}

fn json_reply(stream: &mut TcpStream, status: &str, m: &ControlMessage) {
    reply(stream, status, "application/json", &m.to_bytes());
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" | "htm" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "txt" | "md" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

pub(crate) fn handle(shared: &Arc<Shared>, mut stream: TcpStream) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let (method, path, body_start, length) = loop {
        let mut headers = [httparse::EMPTY_HEADER; 32];
        let mut req = httparse::Request::new(&mut headers);
        match req.parse(&buf) {
            Ok(httparse::Status::Complete(n)) => {
                let length = req
                    .headers
                    .iter()
                    .find(|h| h.name.eq_ignore_ascii_case("content-length"))
                    .and_then(|h| std::str::from_utf8(h.value).ok()?.trim().parse::<usize>().ok())
                    .unwrap_or(0);
                break (req.method.unwrap_or("").to_string(), req.path.unwrap_or("/").to_string(), n, length);
            }
            Ok(httparse::Status::Partial) if buf.len() < HEAD_LIMIT => {}
            _ => return reply(&mut stream, "400 Bad Request", "text/plain", b"bad request\n"),
        }
        match std::io::Read::read(&mut stream, &mut chunk) {
            Ok(0) | Err(_) => return,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
        }
    };
    match method.as_str() {
        "POST" if path == "/command" => {
            if length > MAX_MESSAGE {
                return json_reply(&mut stream, "413 Payload Too Large", &ControlMessage::error(0, "too_large", "message too large"));
            }
            if read_to_limit(&mut stream, &mut buf, body_start + length).is_err() {
                return;
            }
            let body = &buf[body_start..(body_start + length).min(buf.len())];
            let msg = match parse_message(body) {
                Ok(m) => m,
                Err(e) => return json_reply(&mut stream, "400 Bad Request", &ControlMessage::error(0, "malformed", e.to_string())),
            };
            let out = if msg.kind == "subscribe" {
                ControlMessage::error(msg.id, "unsupported", "subscribe needs a full-duplex connection")
            } else {
                respond(shared, &msg)
            };
            json_reply(&mut stream, "200 OK", &out);
        }
        "GET" | "HEAD" => static_asset(shared, &mut stream, &path, method == "HEAD"),
        _ => reply(&mut stream, "405 Method Not Allowed", "text/plain", b"method not allowed\n"),
    }
    let _ = stream.shutdown(Shutdown::Write);
}

fn static_asset(shared: &Shared, stream: &mut TcpStream, path: &str, head_only: bool) {
    let rel = path.split(['?', '#']).next().unwrap_or("/").trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel_path = Path::new(rel);
    if !rel_path.components().all(|c| matches!(c, Component::Normal(_))) {
        return reply(stream, "404 Not Found", "text/plain", b"not found\n");
    }
    let body = match &shared.opts.static_dir {
        Some(dir) => std::fs::read(dir.join(rel_path)).ok(),
        None if rel == "index.html" => Some(INDEX.as_bytes().to_vec()),
        None => None,
    };
    match body {
        Some(b) if head_only => {
            let head = format!("HTTP/1.1 200 OK\r\nContent-Type: {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", content_type(rel_path), b.len());
            let _ = stream.write_all(head.as_bytes());
        }
        Some(b) => reply(stream, "200 OK", content_type(rel_path), &b),
        None => reply(stream, "404 Not Found", "text/plain", b"not found\n"),
    }
}
