use serde_json::{json, Value};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::{Duration, Instant};

use virtlab_core::config::LabConfig;
use virtlab_core::engine::Engine;
use virtlab_service::message::{read_message, write_message};
use virtlab_service::{decode_frame, http_command, serve, Client, ControlMessage, ServeOptions, Service};

fn start_service(cfg: LabConfig, records: Option<std::path::PathBuf>) -> Service {
    let engine = Arc::new(Engine::new(cfg).unwrap());
    let opts = ServeOptions { endpoint: "127.0.0.1:0".into(), heartbeat: Duration::from_millis(300), static_dir: None, records };
    serve(engine, opts).unwrap()
}

fn client(svc: &Service) -> Client {
    let c = Client::connect(svc.local_addr()).unwrap();
    c.set_timeout(Some(Duration::from_secs(60))).unwrap();
    c
}

fn paced() -> LabConfig {
    let mut cfg = LabConfig::default();
    cfg.engine.real_time = true;
    cfg
}

#[test]
fn idle_status() {
    let svc = start_service(LabConfig::default(), None);
    let mut c = client(&svc);
    let r = c.request("status", json!({})).unwrap();
    assert_eq!(r.kind, "status");
    assert_eq!(r.body["state"], "idle");
    assert_eq!(r.body["progress"], 0.0);
}

#[test]
fn unknown_kind_keeps_connection() {
    let svc = start_service(LabConfig::default(), None);
    let mut c = client(&svc);
    let r = c.request("warp_drive", json!({})).unwrap();
    assert_eq!(r.error_code(), Some("unknown_kind"));
    let r = c.request("frame", json!({})).unwrap();
    assert!(r.is_error());
    let r = c.request("status", json!({})).unwrap();
    assert_eq!(r.kind, "status");
}

#[test]
fn malformed_and_stale_ids_answered() {
    let svc = start_service(LabConfig::default(), None);
    let mut c = client(&svc);
    let s = c.stream();
    s.write_all(&5u32.to_be_bytes()).unwrap();
    s.write_all(b"{oops").unwrap();
    let r = read_message(s).unwrap().unwrap();
    assert_eq!(r.error_code(), Some("malformed"));
    write_message(s, &ControlMessage::new(4, "status", json!({}))).unwrap();
    assert_eq!(read_message(s).unwrap().unwrap().kind, "status");
    write_message(s, &ControlMessage::new(4, "status", json!({}))).unwrap();
    let r = read_message(s).unwrap().unwrap();
    assert_eq!((r.id, r.error_code()), (4, Some("bad_id")));
}

#[test]
fn list_protocols_and_config() {
    let svc = start_service(LabConfig::default(), None);
    let mut c = client(&svc);
    let r = c.request("list_protocols", json!({})).unwrap();
    let names: Vec<&str> = r.body["protocols"].as_array().unwrap().iter().map(|p| p["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"cw_odmr") && names.contains(&"hahn_echo"));
    assert!(r.body["params"].as_array().unwrap().iter().any(|p| p["name"] == "repeats"));
    let r = c.request("get_config", json!({})).unwrap();
    assert_eq!(r.body["config"]["spin"]["d_zfs"], 2.87e9);
}

#[test]
fn set_params_validates() {
    let svc = start_service(LabConfig::default(), None);
    let mut c = client(&svc);
    let r = c.request("set_params", json!({ "values": { "mw.power_dbm": -3.0 }, "focus": [1.0, 2.0, 0.0] })).unwrap();
    assert_eq!(r.kind, "set_params", "{r:?}");
    assert_eq!(r.body["focus"], json!([1.0, 2.0, 0.0]));
    let r = c.request("get_config", json!({})).unwrap();
    assert_eq!(r.body["config"]["mw"]["power_dbm"], -3.0);
    let r = c.request("set_params", json!({ "values": { "mw.pwer": 1 } })).unwrap();
    assert_eq!(r.error_code(), Some("key"));
    assert!(r.body["message"].as_str().unwrap().contains("pwer"));
}

#[test]
fn start_then_stop_gives_partial_run() {
    let svc = start_service(paced(), None);
    let mut c = client(&svc);
    let r = c.request("start", json!({ "protocol": "cw_odmr", "params": { "repeats": 100000 } })).unwrap();
    assert_eq!(r.kind, "start", "{r:?}");
    let run_id = r.body["run_id"].as_u64().unwrap();
    let again = c.request("start", json!({ "protocol": "cw_odmr" })).unwrap();
    assert_eq!(again.error_code(), Some("busy"));
    let busy = c.request("set_params", json!({ "values": { "mw.power_dbm": -3.0 } })).unwrap();
    assert_eq!(busy.error_code(), Some("busy"));
    std::thread::sleep(Duration::from_millis(400));
    let stop = c.request("stop", json!({})).unwrap();
    assert_eq!(stop.kind, "stop", "{stop:?}");
    assert_eq!(stop.body["run_id"].as_u64(), Some(run_id));
    assert_eq!(stop.body["partial"], true);
    let s = c.request("status", json!({})).unwrap();
    assert_eq!(s.body["state"], "idle");
    assert_eq!(c.request("stop", json!({})).unwrap().error_code(), Some("not_running"));
}

#[test]
fn pause_and_resume() {
    let svc = start_service(paced(), None);
    let mut c = client(&svc);
    c.request("start", json!({ "protocol": "cw_odmr", "params": { "repeats": 100000 } })).unwrap();
    let p = c.request("pause", json!({})).unwrap();
    assert_eq!(p.body["state"], "paused");
    let r = c.request("resume", json!({})).unwrap();
    assert_eq!(r.body["state"], "running");
    let stop = c.request("stop", json!({})).unwrap();
    assert_eq!(stop.body["partial"], true);
}

fn frames_until_finished(c: &mut Client, run_id: u64) -> Vec<u64> {
    let mut seqs = Vec::new();
    loop {
        let m = c.next_unsolicited().unwrap();
        if m.kind == "log" && m.body["summary"]["run_id"] == run_id {
            return seqs;
        }
        if m.kind == "frame" && m.body.get("heartbeat").is_none() {
            let f = decode_frame(&m).unwrap();
            assert_eq!(f.run_id, run_id);
            seqs.push(f.seq);
        }
    }
}

#[test]
fn subscribers_share_gap_free_sequence() {
    let svc = start_service(LabConfig::default(), None);
    let mut a = client(&svc);
    let mut b = client(&svc);
    assert_eq!(a.request("subscribe", json!({})).unwrap().body["subscribed"], true);
    b.request("subscribe", json!({})).unwrap();
    let mut ctl = client(&svc);
    let r = ctl.request("start", json!({ "protocol": "cw_odmr", "params": { "repeats": 12 } })).unwrap();
    let run_id = r.body["run_id"].as_u64().unwrap();
    let sa = frames_until_finished(&mut a, run_id);
    let sb = frames_until_finished(&mut b, run_id);
    assert_eq!(sa, (1..=12).collect::<Vec<u64>>());
    assert_eq!(sa, sb);
}

#[test]
fn stalled_subscriber_never_blocks() {
    let cfg = LabConfig::default();
    let params = json!({ "protocol": "cw_odmr", "params": { "repeats": 400 } });
    let baseline = {
        let svc = start_service(cfg.clone(), None);
        let mut c = client(&svc);
        let t = Instant::now();
        c.request("start", params.clone()).unwrap();
        wait_idle(&mut c);
        t.elapsed()
    };
    let svc = start_service(cfg, None);
    let mut stalled = client(&svc);
    stalled.request("subscribe", json!({})).unwrap();
    let mut c = client(&svc);
    let t = Instant::now();
    c.request("start", params).unwrap();
    let probe = Instant::now();
    c.request("status", json!({})).unwrap();
    assert!(probe.elapsed() < Duration::from_millis(500));
    wait_idle(&mut c);
    let with_stall = t.elapsed();
    assert!(with_stall < baseline * 2 + Duration::from_secs(2), "{with_stall:?} vs {baseline:?}");
}

fn wait_idle(c: &mut Client) {
    let t = Instant::now();
    loop {
        let s = c.request("status", json!({})).unwrap();
        if s.body["state"] == "idle" && !s.body["last_run"].is_null() {
            return;
        }
        assert!(t.elapsed() < Duration::from_secs(120), "run did not finish");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn heartbeat_when_idle() {
    let svc = start_service(LabConfig::default(), None);
    let mut c = client(&svc);
    c.request("subscribe", json!({})).unwrap();
    let m = c.next_unsolicited().unwrap();
    assert_eq!(m.kind, "frame");
    assert_eq!(m.body["heartbeat"], true);
    assert_eq!(m.body["status"]["state"], "idle");
}

#[test]
fn dependent_protocol_needs_pi() {
    let svc = start_service(LabConfig::default(), None);
    let mut c = client(&svc);
    let r = c.request("start", json!({ "protocol": "t1" })).unwrap();
    assert_eq!(r.error_code(), Some("dependency"));
    let r = c.request("start", json!({ "protocol": "rabi", "params": { "bogus": 1 } })).unwrap();
    assert_eq!(r.error_code(), Some("params"));
}

#[test]
fn finished_protocol_is_saved() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start_service(LabConfig::default(), Some(dir.path().to_path_buf()));
    let mut c = client(&svc);
    c.request("start", json!({ "protocol": "cw_odmr", "params": { "repeats": 2 } })).unwrap();
    wait_idle(&mut c);
    let s = c.request("status", json!({})).unwrap();
    let last = &s.body["last_run"];
    assert_eq!(last["state"], "finished", "{last}");
    let path = last["record"].as_str().unwrap();
    assert!(std::path::Path::new(path).join("meta.txt").exists());
}

#[test]
fn http_one_shot_and_assets() {
    let svc = start_service(LabConfig::default(), None);
    let r = http_command(svc.local_addr(), &ControlMessage::new(9, "status", json!({}))).unwrap();
    assert_eq!((r.id, r.kind.as_str()), (9, "status"));
    assert_eq!(r.body["state"], "idle");
    let r = http_command(svc.local_addr(), &ControlMessage::new(1, "nonsense", Value::Null)).unwrap();
    assert_eq!(r.error_code(), Some("unknown_kind"));
    let get = |path: &str| {
        let mut s = TcpStream::connect(svc.local_addr()).unwrap();
        write!(s, "GET {path} HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
        let mut out = String::new();
        s.read_to_string(&mut out).unwrap();
        out
    };
    let index = get("/");
    assert!(index.starts_with("HTTP/1.1 200"), "{index}");
    assert!(index.contains("text/html"));
    assert!(get("/../Cargo.toml").starts_with("HTTP/1.1 404"));
}

#[test]
fn static_dir_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let engine = Arc::new(Engine::new(LabConfig::default()).unwrap());
    let opts = ServeOptions { endpoint: "127.0.0.1:0".into(), heartbeat: Duration::from_secs(2), static_dir: Some(dir.path().into()), records: None };
    let svc = serve(engine, opts).unwrap();
    let mut s = TcpStream::connect(svc.local_addr()).unwrap();
    s.write_all(b"GET /app.js HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    assert!(out.contains("text/javascript") && out.ends_with("console.log(1)"), "{out}");
}

#[test]
fn busy_endpoint_is_startup_error() {
    let svc = start_service(LabConfig::default(), None);
    let engine = Arc::new(Engine::new(LabConfig::default()).unwrap());
    let opts = ServeOptions { endpoint: svc.local_addr().to_string(), heartbeat: Duration::from_secs(2), static_dir: None, records: None };
    assert!(serve(engine, opts).is_err());
}
