use serde_json::{json, Value};
use std::collections::HashMap;
use std::io::{self, Read};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};
use thiserror::Error;

use virtlab_core::config::LabConfig;
use virtlab_core::engine::{Command, Engine, EngineError, RunHandle, RunOutput, RunRequest, Subscription};
use virtlab_core::protocols::{ProtocolKind, ProtocolParams};
use virtlab_core::record::{latest_record, load_record, save_record};

use crate::http;
use crate::message::{encode_frame, heartbeat, parse_message, read_payload, write_message, ControlMessage, WireError, KINDS};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot listen on {endpoint}: {source}")]
    Endpoint { endpoint: String, source: io::Error },
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        "endpoint"
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub endpoint: String,
    pub heartbeat: Duration,
    /// Directory served over HTTP GET; a built-in page when unset.
    pub static_dir: Option<PathBuf>,
    /// Where finished protocol records are saved.
    pub records: Option<PathBuf>,
}

impl ServeOptions {
    pub fn from_config(cfg: &LabConfig) -> Self {
        Self {
            endpoint: cfg.service.endpoint.clone(),
            heartbeat: Duration::from_secs_f64(cfg.service.heartbeat_s),
            static_dir: cfg.service.static_dir.as_ref().map(PathBuf::from),
            records: None,
        }
    }
}

/// Error reply payload: `(code, message)`.
pub(crate) type Reply = Result<Value, (String, String)>;

fn fail(code: &str, message: impl Into<String>) -> (String, String) {
    (code.to_string(), message.into())
}

fn engine_fail(e: EngineError) -> (String, String) {
    fail(e.code(), e.to_string())
}

struct Active {
    handle: RunHandle,
    label: String,
}

struct State {
    config: LabConfig,
    active: Option<Active>,
    finished: HashMap<u64, Value>,
    last: Option<Value>,
    last_pi: Option<f64>,
}

pub(crate) struct Shared {
    engine: Arc<Engine>,
    pub(crate) opts: ServeOptions,
    state: Mutex<State>,
    done: Condvar,
    listeners: Mutex<Vec<Sender<Out>>>,
    streams: Mutex<Vec<TcpStream>>,
    shutdown: AtomicBool,
}

enum Out {
    Msg(ControlMessage),
    Subscribe(Subscription),
}

/// A running control service.
pub struct Service {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

/// Bind `opts.endpoint` and start accepting connections.
pub fn serve(engine: Arc<Engine>, opts: ServeOptions) -> Result<Service, ServiceError> {
    let listener = TcpListener::bind(&opts.endpoint).map_err(|source| ServiceError::Endpoint { endpoint: opts.endpoint.clone(), source })?;
    let addr = listener.local_addr().map_err(|source| ServiceError::Endpoint { endpoint: opts.endpoint.clone(), source })?;
    let config = engine.config().unwrap_or_default();
    let shared = Arc::new(Shared {
        engine,
        opts,
        state: Mutex::new(State { config, active: None, finished: HashMap::new(), last: None, last_pi: None }),
        done: Condvar::new(),
        listeners: Mutex::new(Vec::new()),
        streams: Mutex::new(Vec::new()),
        shutdown: AtomicBool::new(false),
    });
    let acc = Arc::clone(&shared);
    let acceptor = thread::spawn(move || {
        for stream in listener.incoming() {
            if acc.shutdown.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            if let Ok(c) = stream.try_clone() {
                acc.streams.lock().unwrap().push(c);
            }
            let sh = Arc::clone(&acc);
            thread::spawn(move || connection(sh, stream));
        }
    });
    Ok(Service { addr, shared, acceptor: Some(acceptor) })
}

impl Service {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Block until the acceptor exits.
    pub fn join(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    /// Stop accepting, close open connections and abort any run.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let Some(h) = self.acceptor.take() else { return };
        self.shared.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        let _ = h.join();
        for s in self.shared.streams.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        let active = self.shared.state.lock().unwrap().active.as_ref().map(|a| a.handle);
        if let Some(h) = active {
            let _ = self.shared.engine.control(h, Command::Abort);
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.stop();
    }
}

fn is_http(head: &[u8]) -> bool {
    [&b"GET "[..], b"POST", b"HEAD", b"PUT ", b"DELE", b"OPTI"].iter().any(|m| head.starts_with(m))
}

fn connection(shared: Arc<Shared>, stream: TcpStream) {
    let mut head = [0u8; 4];
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        match stream.peek(&mut head) {
            Ok(0) => return,
            Ok(n) if n >= 4 => break,
            Ok(_) if Instant::now() < deadline => thread::sleep(Duration::from_millis(2)),
            Ok(_) => return,
            Err(_) => return,
        }
    }
    if is_http(&head) {
        http::handle(&shared, stream);
    } else {
        duplex(shared, stream);
    }
}

fn duplex(shared: Arc<Shared>, mut stream: TcpStream) {
    let Ok(out) = stream.try_clone() else { return };
    let (tx, rx) = mpsc::channel::<Out>();
    let beat = shared.opts.heartbeat;
    let sh = Arc::clone(&shared);
    let writer = thread::spawn(move || writer(out, rx, beat, sh));
    let mut last_id = 0u64;
    loop {
        let payload = match read_payload(&mut stream) {
            Ok(Some(p)) => p,
            Ok(None) => break,
            Err(WireError::TooLarge(n)) => {
                let _ = tx.send(Out::Msg(ControlMessage::error(0, "too_large", format!("message of {n} bytes refused"))));
                break;
            }
            Err(_) => break,
        };
        let msg = match parse_message(&payload) {
            Ok(m) => m,
            Err(e) => {
                let _ = tx.send(Out::Msg(ControlMessage::error(0, "malformed", e.to_string())));
                continue;
            }
        };
        if msg.id <= last_id {
            let _ = tx.send(Out::Msg(ControlMessage::error(msg.id, "bad_id", format!("id {} does not exceed {last_id}", msg.id))));
            continue;
        }
        last_id = msg.id;
        if msg.kind == "subscribe" {
            shared.listeners.lock().unwrap().push(tx.clone());
            let _ = tx.send(Out::Subscribe(shared.engine.bus().subscribe()));
            let _ = tx.send(Out::Msg(ControlMessage::new(msg.id, "subscribe", json!({ "subscribed": true }))));
            continue;
        }
        let reply = respond(&shared, &msg);
        if tx.send(Out::Msg(reply)).is_err() {
            break;
        }
    }
    drop(tx);
    let _ = writer.join();
    let _ = stream.shutdown(Shutdown::Both);
}

/// Sole writer of a duplex connection. Replies go first; frames come from the
/// bus subscription, whose bounded queue drops the oldest frames when this
/// connection cannot keep up.
fn writer(mut out: TcpStream, rx: mpsc::Receiver<Out>, beat: Duration, shared: Arc<Shared>) {
    let mut sub: Option<Subscription> = None;
    let mut last_write = Instant::now();
    loop {
        let wait = if sub.is_some() { Duration::from_millis(10) } else { Duration::from_millis(250) };
        match rx.recv_timeout(wait) {
            Ok(Out::Msg(m)) => {
                if write_message(&mut out, &m).is_err() {
                    return;
                }
                last_write = Instant::now();
                continue;
            }
            Ok(Out::Subscribe(s)) => {
                sub = Some(s);
                continue;
            }
            Err(RecvTimeoutError::Disconnected) => return,
            Err(RecvTimeoutError::Timeout) => {}
        }
        if let Some(s) = &sub {
            for _ in 0..64 {
                let Some(f) = s.try_recv() else { break };
                if write_message(&mut out, &encode_frame(&f)).is_err() {
                    return;
                }
                last_write = Instant::now();
            }
            if last_write.elapsed() >= beat {
                let status = serde_json::to_value(shared.engine.status()).unwrap_or(Value::Null);
                if write_message(&mut out, &heartbeat(status)).is_err() {
                    return;
                }
                last_write = Instant::now();
            }
        }
    }
}

/// Terminal reply to one command.
pub(crate) fn respond(shared: &Arc<Shared>, msg: &ControlMessage) -> ControlMessage {
    match dispatch(shared, &msg.kind, &msg.body) {
        Ok(body) => ControlMessage::new(msg.id, &msg.kind, body),
        Err((code, message)) => ControlMessage::error(msg.id, &code, message),
    }
}

fn dispatch(shared: &Arc<Shared>, kind: &str, body: &Value) -> Reply {
    match kind {
        "list_protocols" => Ok(list_protocols()),
        "get_config" => {
            let cfg = shared.state.lock().unwrap().config.clone();
            serde_json::to_value(&cfg).map(|c| json!({ "config": c })).map_err(|e| fail("internal", e.to_string()))
        }
        "set_params" => set_params(shared, body),
        "start" => start(shared, body),
        "stop" => stop(shared),
        "pause" => control(shared, Command::Pause),
        "resume" => control(shared, Command::Resume),
        "status" => {
            let st = shared.state.lock().unwrap();
            let mut v = serde_json::to_value(shared.engine.status()).unwrap_or(Value::Null);
            v["last_run"] = st.last.clone().unwrap_or(Value::Null);
            Ok(v)
        }
        "subscribe" => Err(fail("unsupported", "subscribe needs a full-duplex connection")),
        "frame" | "log" | "error" => Err(fail("unsupported", format!("{kind} messages are sent by the service only"))),
        other => Err(fail("unknown_kind", format!("unknown message kind {other:?}; known kinds: {}", KINDS.join(", ")))),
    }
}

fn field(name: &str, ty: &str, unit: &str, doc: &str) -> Value {
    json!({ "name": name, "type": ty, "unit": unit, "doc": doc })
}

fn list_protocols() -> Value {
    let protocols: Vec<Value> =
        ProtocolKind::ALL.iter().map(|k| json!({ "name": k.name(), "needs_pi": k.needs_pi() })).collect();
    let params = vec![
        field("repeats", "integer", "", "repetitions (pulsed) or sweeps (CW)"),
        field("start", "number", "sweep unit", "sweep start"),
        field("stop", "number", "sweep unit", "sweep stop"),
        field("step", "number", "sweep unit", "sweep step"),
        field("points", "integer", "", "sweep points, overrides step"),
        field("log_sweep", "bool", "", "geometric sweep spacing"),
        field("dwell", "number", "s", "integration per CW point or scan pixel"),
        field("mw_frequency", "number", "Hz", "drive frequency"),
        field("mw_power_dbm", "number", "dBm", "drive power"),
        field("laser_power", "number", "W", "laser set power"),
        field("detuning", "number", "Hz", "ramsey drive offset"),
        field("pi", "number", "s", "pi pulse duration"),
        json!({ "name": "averaging", "type": "enum", "values": ["np", "pn"] }),
        json!({ "name": "sync", "type": "enum", "values": ["method1", "method2"] }),
        field("blind", "bool", "", "locate readout pulses by extraction"),
        field("alternate", "bool", "", "alternate a final 3pi/2 pulse"),
    ];
    let defaults = serde_json::to_value(ProtocolParams::default()).unwrap_or(Value::Null);
    json!({ "protocols": protocols, "params": params, "defaults": defaults })
}

fn set_params(shared: &Arc<Shared>, body: &Value) -> Reply {
    let mut st = shared.state.lock().unwrap();
    if let Some(a) = &st.active {
        return Err(fail("busy", format!("engine busy with run {}", a.handle.0)));
    }
    let mut cfg = st.config.clone();
    if let Some(values) = body.get("values") {
        let map = values.as_object().ok_or_else(|| fail("params", "values must be an object of dotted keys"))?;
        let mut pairs = Vec::new();
        for (k, v) in map {
            let tv = toml::Value::try_from(v).map_err(|e| fail("params", format!("{k}: {e}")))?;
            pairs.push((k.clone(), tv));
        }
        cfg = cfg.with_values(&pairs).map_err(|e| fail(e.code(), e.to_string()))?;
    }
    let focus = match body.get("focus") {
        None => None,
        Some(f) => Some(serde_json::from_value::<[f64; 3]>(f.clone()).map_err(|e| fail("params", format!("focus: {e}")))?),
    };
    let applied = cfg.clone();
    shared
        .engine
        .with_lab(|lab| {
            lab.cfg = applied;
            if let Some(f) = focus {
                lab.focus = f;
            }
            lab.focus
        })
        .map_err(engine_fail)
        .map(|focus| {
            st.config = cfg;
            json!({ "applied": true, "focus": focus })
        })
}

fn pi_from_records(shared: &Shared) -> Option<f64> {
    let root = shared.opts.records.as_ref()?;
    let dir = latest_record(root, &ProtocolKind::pi_sources())?;
    load_record(&dir).ok()?.record.derived.get("pi_s").copied()
}

fn start(shared: &Arc<Shared>, body: &Value) -> Reply {
    let mut st = shared.state.lock().unwrap();
    if let Some(a) = &st.active {
        return Err(fail("busy", format!("engine busy with run {}", a.handle.0)));
    }
    let (req, label) = if let Some(r) = body.get("request") {
        let req: RunRequest = serde_json::from_value(r.clone()).map_err(|e| fail("params", e.to_string()))?;
        let label = r.get("kind").and_then(Value::as_str).unwrap_or("run").to_string();
        (req, label)
    } else {
        let name = body.get("protocol").and_then(Value::as_str).ok_or_else(|| fail("params", "start needs a protocol or a request"))?;
        let kind = ProtocolKind::parse(name).ok_or_else(|| fail("params", format!("unknown protocol {name:?}")))?;
        let mut params: ProtocolParams = match body.get("params") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| fail("params", e.to_string()))?,
            None => ProtocolParams::default(),
        };
        if kind.needs_pi() && params.pi.is_none() {
            params.pi = st.last_pi.or_else(|| pi_from_records(shared));
        }
        params.validate().map_err(|e| fail(e.code(), e.to_string()))?;
        if kind.needs_pi() && params.pi.is_none() {
            return Err(fail("dependency", format!("{name} needs a pi duration: run rabi or pi_calibration first")));
        }
        (RunRequest::Protocol { protocol: kind, params }, name.to_string())
    };
    let handle = shared.engine.start(req).map_err(engine_fail)?;
    st.active = Some(Active { handle, label: label.clone() });
    drop(st);
    let sh = Arc::clone(shared);
    thread::spawn(move || complete(sh, handle));
    Ok(json!({ "run_id": handle.0, "run": label }))
}

fn complete(shared: Arc<Shared>, handle: RunHandle) {
    let out = shared.engine.wait(handle);
    let label = shared.state.lock().unwrap().active.as_ref().map(|a| a.label.clone()).unwrap_or_default();
    let mut summary = json!({ "run_id": handle.0, "run": label });
    let mut pi = None;
    match out {
        Ok(o) => {
            let partial = o.is_partial();
            summary["state"] = json!(if partial { "aborted" } else { "finished" });
            summary["partial"] = json!(partial);
            if let RunOutput::Protocol(rec) = &o {
                summary["derived"] = serde_json::to_value(&rec.derived).unwrap_or(Value::Null);
                summary["fit"] = serde_json::to_value(&rec.fit).unwrap_or(Value::Null);
                summary["notes"] = json!(rec.notes);
                if !partial && ProtocolKind::pi_sources().contains(&rec.kind) {
                    pi = rec.derived.get("pi_s").copied();
                }
                if let Some(root) = &shared.opts.records {
                    match save_record(root, rec) {
                        Ok(p) => summary["record"] = json!(p.display().to_string()),
                        Err(e) => summary["record_error"] = json!({ "code": e.code(), "message": e.to_string() }),
                    }
                }
            }
        }
        Err(e) => {
            summary["state"] = json!("failed");
            summary["partial"] = json!(true);
            summary["error"] = json!({ "code": e.code(), "message": e.to_string() });
        }
    }
    {
        let mut st = shared.state.lock().unwrap();
        st.active = None;
        if pi.is_some() {
            st.last_pi = pi;
        }
        st.last = Some(summary.clone());
        st.finished.insert(handle.0, summary.clone());
        shared.done.notify_all();
    }
    let log = ControlMessage::new(0, "log", json!({ "event": "run_finished", "summary": summary }));
    shared.listeners.lock().unwrap().retain(|tx| tx.send(Out::Msg(log.clone())).is_ok());
}

fn stop(shared: &Arc<Shared>) -> Reply {
    let st = shared.state.lock().unwrap();
    let Some(handle) = st.active.as_ref().map(|a| a.handle) else {
        return Err(fail("not_running", "no run is active"));
    };
    let _ = shared.engine.control(handle, Command::Abort);
    let (mut st, _) = shared
        .done
        .wait_timeout_while(st, Duration::from_secs(120), |s| !s.finished.contains_key(&handle.0))
        .unwrap();
    st.finished.remove(&handle.0).ok_or_else(|| fail("timeout", format!("run {} did not stop", handle.0)))
}

fn control(shared: &Arc<Shared>, cmd: Command) -> Reply {
    let handle = shared.state.lock().unwrap().active.as_ref().map(|a| a.handle);
    let Some(handle) = handle else {
        return Err(fail("not_running", "no run is active"));
    };
    let status = shared.engine.control(handle, cmd).map_err(engine_fail)?;
    Ok(serde_json::to_value(status).unwrap_or(Value::Null))
}

/// Read everything left on `stream` up to `limit` bytes.
pub(crate) fn read_to_limit(stream: &mut TcpStream, buf: &mut Vec<u8>, want: usize) -> io::Result<()> {
    let mut chunk = [0u8; 8192];
    while buf.len() < want {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    Ok(())
}
