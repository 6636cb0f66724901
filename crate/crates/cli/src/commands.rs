use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use virtlab_core::config::{load_config, LabConfig};
use virtlab_core::dsp::{fit, FitModel};
use virtlab_core::engine::{Engine, NoHooks, VirtualLab};
use virtlab_core::protocols::{derived_mismatches, replay, run_protocol, ProtocolKind, ProtocolParams};
use virtlab_core::record::{fit_text, latest_record, load_record, read_trace, save_record, TRACE_FILE};
use virtlab_core::sequence::{build, compile, render, validate, Averaging, SequenceKind, SequenceOptions, SyncMethod};
use virtlab_service::{serve, ServeOptions};

use crate::{AvgArg, Cli, Cmd, Failure, ModelArg, OpticsCmd, SeqArgs, SeqCmd, SyncArg};

type Out = Result<(), Failure>;

fn config(cli: &Cli) -> Result<LabConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p).map_err(|e| Failure::new(e.code(), e.to_string()))?,
        None => LabConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.validate().map_err(|e| Failure::new(e.code(), e.to_string()))?;
    }
    Ok(cfg)
}

pub fn dispatch(cli: Cli) -> Out {
    let cfg = config(&cli)?;
    match &cli.command {
        Cmd::Optics(OpticsCmd::Report { kv }) => {
            let r = cfg.optics.report().map_err(|e| Failure::new("optics", e.to_string()))?;
            print!("{}", if *kv { r.to_key_values() } else { r.to_text() });
            Ok(())
        }
        Cmd::Seq(cmd) => seq(&cfg, cmd),
        Cmd::Run { protocol, params } => run(&cfg, &cli.out, protocol, params),
        Cmd::Replay { record } => replay_record(record),
        Cmd::Serve { endpoint, static_dir } => {
            let mut opts = ServeOptions::from_config(&cfg);
            if let Some(e) = endpoint {
                opts.endpoint = e.clone();
            }
            if let Some(d) = static_dir {
                opts.static_dir = Some(d.clone());
            }
            opts.records = Some(cli.out.clone());
            let engine = Engine::new(cfg).map_err(|e| Failure::new(e.code(), e.to_string()))?;
            let svc = serve(Arc::new(engine), opts).map_err(|e| Failure::new(e.code(), e.to_string()))?;
            println!("listening on {}", svc.local_addr());
            svc.join();
            Ok(())
        }
        Cmd::Fit { trace, model, x, y, init } => fit_trace(trace, *model, x.as_deref(), y.as_deref(), init.as_deref()),
    }
}

fn seq(cfg: &LabConfig, cmd: &SeqCmd) -> Out {
    let args: &SeqArgs = match cmd {
        SeqCmd::Compile(a) | SeqCmd::Render(a) | SeqCmd::Validate(a) => a,
    };
    let kind = SequenceKind::parse(&args.kind)
        .filter(|k| *k != SequenceKind::Custom)
        .ok_or_else(|| Failure::new("sequence", format!("unknown sequence kind {:?}", args.kind)))?;
    if args.points < 1 {
        return Err(Failure::new("sequence", "points must be at least 1"));
    }
    let sweep: Vec<f64> = if args.points == 1 {
        vec![args.start]
    } else {
        (0..args.points).map(|k| args.start + (args.stop - args.start) * k as f64 / (args.points - 1) as f64).collect()
    };
    let mut fixed = cfg.timings;
    fixed.pi_len = Some(args.pi);
    fixed.pi_half_len = Some(args.pi / 2.0);
    let options = SequenceOptions { constant_period: args.constant_period, alternate_final_3pi2: args.alternate, ..Default::default() };
    let spec = build(kind, sweep, fixed, options).map_err(|e| Failure::new("sequence", e.to_string()))?;
    let sync = match args.sync {
        SyncArg::Method1 => SyncMethod::Method1,
        SyncArg::Method2 => SyncMethod::Method2,
    };
    let avg = match args.averaging {
        AvgArg::Np => Averaging::Np,
        AvgArg::Pn => Averaging::Pn,
    };
    let seq = compile(&spec, &cfg.pulser, sync, avg, args.repeats).map_err(|e| Failure::new("sequence", e.to_string()))?;
    match cmd {
        SeqCmd::Compile(_) => {
            println!("kind={}", seq.kind.name());
            println!("params={}", seq.n_params());
            println!("repeats={}", seq.repeats);
            println!("instructions={}", seq.program.instruction_count());
            println!("duration_s={:e}", seq.total_duration());
            println!("readout_windows={}", seq.window_count());
            println!("sync_edges={}", seq.sync_edges().len());
        }
        SeqCmd::Render(_) => print!("{}", render(&seq)),
        SeqCmd::Validate(_) => {
            let report = validate(&seq, &cfg.pulser);
            if !report.is_clean() {
                let list: Vec<String> = report.findings.iter().map(|f| format!("{f:?}")).collect();
                return Err(Failure::new("validation", list.join("; ")));
            }
            println!("ok");
        }
    }
    Ok(())
}

/// `key=value` pairs as protocol parameters. Values are TOML literals; bare
/// words are taken as strings.
pub fn parse_params(pairs: &[String]) -> Result<ProtocolParams, Failure> {
    let mut table = toml::Table::new();
    for p in pairs {
        let (k, v) = p.split_once('=').ok_or_else(|| Failure::new("params", format!("expected key=value, got {p:?}")))?;
        let k = k.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {}", v.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.trim().to_string()));
        table.insert(k.to_string(), value);
    }
    let params: ProtocolParams = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Failure::new("params", e.message().to_string()))?;
    params.validate().map_err(|e| Failure::new(e.code(), e.to_string()))?;
    Ok(params)
}

fn run(cfg: &LabConfig, out: &Path, protocol: &str, pairs: &[String]) -> Out {
    let kind = ProtocolKind::parse(protocol).ok_or_else(|| Failure::new("params", format!("unknown protocol {protocol:?}")))?;
    let mut params = parse_params(pairs)?;
    if kind.needs_pi() && params.pi.is_none() {
        if let Some(dir) = latest_record(out, &ProtocolKind::pi_sources()) {
            let loaded = load_record(&dir).map_err(|e| Failure::new(e.code(), e.to_string()))?;
            params.pi = loaded.record.derived.get("pi_s").copied();
        }
    }
    let mut lab = VirtualLab::new(cfg.clone());
    let record = run_protocol(&mut lab, kind, &params, &NoHooks).map_err(|e| Failure::new(e.code(), e.to_string()))?;
    let dir = save_record(out, &record).map_err(|e| Failure::new(e.code(), e.to_string()))?;
    println!("record: {}", dir.display());
    for (k, v) in &record.derived {
        println!("{k} = {v:e}");
    }
    for n in &record.notes {
        println!("note: {n}");
    }
    Ok(())
}

fn replay_record(dir: &Path) -> Out {
    let loaded = load_record(dir).map_err(|e| Failure::new(e.code(), e.to_string()))?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let again = replay(&loaded.record, &NoHooks).map_err(|e| Failure::new(e.code(), e.to_string()))?;
    let diff = derived_mismatches(&loaded.record, &again);
    if !diff.is_empty() {
        return Err(Failure::new("mismatch", format!("derived values differ: {}", diff.join(", "))));
    }
    println!("MATCH");
    Ok(())
}

fn fit_trace(path: &Path, model: ModelArg, x: Option<&str>, y: Option<&str>, init: Option<&[f64]>) -> Out {
    let file = if path.is_dir() { path.join(TRACE_FILE) } else { path.to_path_buf() };
    let trace = read_trace(&file).map_err(|e| Failure::new(e.code(), e.to_string()))?;
    let pick = |name: Option<&str>, default: usize| -> Result<Vec<f64>, Failure> {
        match name {
            Some(n) => trace.column(n).ok_or_else(|| Failure::new("params", format!("no column named {n:?}"))),
            None => Ok(trace.rows.iter().map(|r| r[default]).collect()),
        }
    };
    let xs = pick(x, 0)?;
    let ys = pick(y, trace.columns.len().saturating_sub(1))?;
    let model = match model {
        ModelArg::LorentzianMulti => FitModel::LorentzianMulti,
        ModelArg::ExpDecay => FitModel::ExpDecay,
        ModelArg::DampedCosine => FitModel::DampedCosine,
    };
    let result = fit(model, &xs, &ys, init).map_err(|e| Failure::new("analysis", e.to_string()))?;
    print!("{}", fit_text(Some(&result), &BTreeMap::new()));
    Ok(())
}
