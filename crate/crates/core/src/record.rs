//! Record storage. A record is a directory holding
//!
//! - `trace.csv`: columnar numeric data behind a typed `#` header,
//! - `fit.txt`: fit parameters and derived values as `key = value` lines,
//! - `meta.txt`: TOML sidecar with schema version, seed, timestamps,
//!   parameters, the full lab configuration and hashes of the other two files.
//!
//! `meta.txt` is written last, so a directory without it is an unfinished run.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::config::LabConfig;
use crate::dsp::{FitModel, FitResult};
use crate::protocols::{Column, ProtocolKind, ProtocolParams, ProtocolRecord, TraceData};

pub const SCHEMA_MAJOR: u32 = 1;
pub const SCHEMA_MINOR: u32 = 0;

pub const TRACE_FILE: &str = "trace.csv";
pub const META_FILE: &str = "meta.txt";
pub const FIT_FILE: &str = "fit.txt";

const TRACE_MAGIC: &str = "# virtlab-trace";
const FIT_MAGIC: &str = "# virtlab-fit";

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("schema {found} cannot be read by this version (supports {SCHEMA_MAJOR}.x)")]
    Migration { found: String },
    #[error("format: {0}")]
    Format(String),
}

impl RecordError {
    pub fn code(&self) -> &'static str {
        match self {
            RecordError::Io { .. } => "io",
            RecordError::Integrity(_) => "integrity",
            RecordError::Migration { .. } => "migration",
            RecordError::Format(_) => "format",
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::Io { path: path.display().to_string(), source }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str) -> Result<f64, RecordError> {
    s.trim().parse::<f64>().map_err(|_| RecordError::Format(format!("not a number: {s:?}")))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Integrity {
    rows: usize,
    columns: usize,
    trace_sha256: String,
    fit_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    schema: String,
    kind: ProtocolKind,
    seed: u64,
    started: String,
    finished: String,
    clock_start: f64,
    focus_start: [f64; 3],
    partial: bool,
    notes: Vec<String>,
    integrity: Integrity,
    params: ProtocolParams,
    config: LabConfig,
}

/// Header line block of a trace file.
fn trace_header(trace: &TraceData) -> String {
    let names: Vec<&str> = trace.columns.iter().map(|c| c.name.as_str()).collect();
    let units: Vec<&str> = trace.columns.iter().map(|c| c.unit.as_str()).collect();
    let period = trace.sample_period.map_or("none".to_string(), fmt_f64);
    format!(
        "{TRACE_MAGIC} {SCHEMA_MAJOR}.{SCHEMA_MINOR}\n# units: {}\n# sample_period: {period}\n{}\n",
        units.join(","),
        names.join(",")
    )
}

fn trace_row(row: &[f64]) -> String {
    let mut s = row.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

fn check_columns(columns: &[Column]) -> Result<(), RecordError> {
    if columns.is_empty() {
        return Err(RecordError::Format("trace has no columns".into()));
    }
    for c in columns {
        if c.name.is_empty() || c.unit.is_empty() {
            return Err(RecordError::Format("trace columns need a name and a unit".into()));
        }
        if c.name.contains([',', '\n']) || c.unit.contains([',', '\n']) {
            return Err(RecordError::Format(format!("column {:?} contains a separator", c.name)));
        }
    }
    Ok(())
}

/// Appends rows to a trace file. Each row is flushed whole, so a concurrent
/// reader using [`read_trace_prefix`] always sees complete rows.
pub struct TraceWriter {
    out: BufWriter<File>,
    path: PathBuf,
    columns: usize,
    last_first: Option<f64>,
    rows: usize,
}

impl TraceWriter {
    pub fn create(path: &Path, columns: &[Column], sample_period: Option<f64>) -> Result<Self, RecordError> {
        check_columns(columns)?;
        let file = File::create(path).map_err(io(path))?;
        let mut out = BufWriter::new(file);
        let header = trace_header(&TraceData { columns: columns.to_vec(), rows: Vec::new(), sample_period });
        out.write_all(header.as_bytes()).map_err(io(path))?;
        out.flush().map_err(io(path))?;
        Ok(Self { out, path: path.to_path_buf(), columns: columns.len(), last_first: None, rows: 0 })
    }

    pub fn append(&mut self, row: &[f64]) -> Result<(), RecordError> {
        if row.len() != self.columns {
            return Err(RecordError::Format(format!("row has {} values, trace has {} columns", row.len(), self.columns)));
        }
        if let Some(prev) = self.last_first {
            if row[0] < prev {
                return Err(RecordError::Format(format!("first column not monotone: {} after {prev}", row[0])));
            }
        }
        self.out.write_all(trace_row(row).as_bytes()).map_err(io(&self.path))?;
        self.out.flush().map_err(io(&self.path))?;
        self.last_first = Some(row[0]);
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

fn parse_trace(text: &str, prefix: bool) -> Result<TraceData, RecordError> {
    let mut lines = text.split_inclusive('\n');
    let mut next_line = |what: &str| -> Result<&str, RecordError> {
        let l = lines.next().ok_or_else(|| RecordError::Integrity(format!("trace ends before {what}")))?;
        l.strip_suffix('\n').ok_or_else(|| RecordError::Integrity(format!("trace ends inside {what}")))
    };
    let magic = next_line("the header")?;
    let version = magic
        .strip_prefix(TRACE_MAGIC)
        .map(str::trim)
        .ok_or_else(|| RecordError::Format("not a virtlab trace file".into()))?;
    check_schema(version)?;
    let units: Vec<String> = next_line("the unit line")?
        .strip_prefix("# units:")
        .ok_or_else(|| RecordError::Format("missing units line".into()))?
        .trim()
        .split(',')
        .map(str::to_string)
        .collect();
    let period = next_line("the sample period")?
        .strip_prefix("# sample_period:")
        .ok_or_else(|| RecordError::Format("missing sample_period line".into()))?
        .trim()
        .to_string();
    let sample_period = if period == "none" { None } else { Some(parse_f64(&period)?) };
    let names: Vec<&str> = next_line("the column names")?.split(',').collect();
    if names.len() != units.len() || units.iter().any(|u| u.is_empty()) {
        return Err(RecordError::Format("every column needs a unit".into()));
    }
    let columns: Vec<Column> = names.iter().zip(&units).map(|(n, u)| Column { name: n.to_string(), unit: u.clone() }).collect();
    let mut rows = Vec::new();
    for line in lines {
        let Some(body) = line.strip_suffix('\n') else {
            if prefix {
                break;
            }
            return Err(RecordError::Integrity(format!("truncated row {}", rows.len())));
        };
        let row: Vec<f64> = body.split(',').map(parse_f64).collect::<Result<_, _>>()?;
        if row.len() != columns.len() {
            return Err(RecordError::Integrity(format!("row {} has {} of {} values", rows.len(), row.len(), columns.len())));
        }
        rows.push(row);
    }
    if rows.windows(2).any(|w| w[1][0] < w[0][0]) {
        return Err(RecordError::Format("first column is not monotone".into()));
    }
    Ok(TraceData { columns, rows, sample_period })
}

/// Read a complete trace file.
pub fn read_trace(path: &Path) -> Result<TraceData, RecordError> {
    parse_trace(&fs::read_to_string(path).map_err(io(path))?, false)
}

/// Read the complete rows of a trace file that may still be growing.
pub fn read_trace_prefix(path: &Path) -> Result<TraceData, RecordError> {
    parse_trace(&fs::read_to_string(path).map_err(io(path))?, true)
}

/// Text of `fit.txt`.
pub fn fit_text(fit: Option<&FitResult>, derived: &BTreeMap<String, f64>) -> String {
    let mut s = format!("{FIT_MAGIC} {SCHEMA_MAJOR}.{SCHEMA_MINOR}\n");
    match fit {
        Some(f) => {
            s += &format!("model = {}\n", f.model.name());
            s += &format!("converged = {}\n", f.converged);
            s += &format!("iterations = {}\n", f.iterations);
            s += &format!("residual_rms = {}\n", fmt_f64(f.residual_rms));
            for (k, v) in &f.params {
                s += &format!("param.{k} = {}\n", fmt_f64(*v));
            }
        }
        None => s += "model = none\n",
    }
    for (k, v) in derived {
        s += &format!("derived.{k} = {}\n", fmt_f64(*v));
    }
    s
}

fn parse_fit(text: &str) -> Result<(Option<FitResult>, BTreeMap<String, f64>), RecordError> {
    let mut lines = text.lines();
    let version = lines
        .next()
        .and_then(|l| l.strip_prefix(FIT_MAGIC))
        .ok_or_else(|| RecordError::Format("not a virtlab fit file".into()))?;
    check_schema(version.trim())?;
    let mut model = None;
    let (mut converged, mut iterations, mut rms) = (None, None, None);
    let mut params = Vec::new();
    let mut derived = BTreeMap::new();
    for line in lines {
        let (k, v) = line.split_once(" = ").ok_or_else(|| RecordError::Format(format!("bad fit line {line:?}")))?;
        let bad = || RecordError::Format(format!("bad value in fit line {line:?}"));
        match k {
            "model" if v == "none" => model = Some(None),
            "model" => model = Some(Some(FitModel::parse(v).ok_or_else(bad)?)),
            "converged" => converged = Some(v.parse::<bool>().map_err(|_| bad())?),
            "iterations" => iterations = Some(v.parse::<usize>().map_err(|_| bad())?),
            "residual_rms" => rms = Some(parse_f64(v)?),
            _ => {
                if let Some(name) = k.strip_prefix("param.") {
                    params.push((name.to_string(), parse_f64(v)?));
                } else if let Some(name) = k.strip_prefix("derived.") {
                    derived.insert(name.to_string(), parse_f64(v)?);
                } else {
                    return Err(RecordError::Format(format!("unknown fit key {k:?}")));
                }
            }
        }
    }
    let fit = match model.ok_or_else(|| RecordError::Format("fit file names no model".into()))? {
        None => None,
        Some(model) => {
            let missing = || RecordError::Format("incomplete fit summary".into());
            Some(FitResult {
                model,
                params,
                residual_rms: rms.ok_or_else(missing)?,
                converged: converged.ok_or_else(missing)?,
                iterations: iterations.ok_or_else(missing)?,
            })
        }
    };
    Ok((fit, derived))
}

/// Accepts `major.minor` with a matching major. Newer minors are readable.
fn check_schema(version: &str) -> Result<Option<String>, RecordError> {
    let migration = || RecordError::Migration { found: version.to_string() };
    let (major, minor) = version.split_once('.').ok_or_else(migration)?;
    let major: u32 = major.parse().map_err(|_| migration())?;
    let minor: u32 = minor.parse().map_err(|_| migration())?;
    if major != SCHEMA_MAJOR {
        return Err(migration());
    }
    Ok((minor > SCHEMA_MINOR).then(|| format!("record schema {version} is newer than {SCHEMA_MAJOR}.{SCHEMA_MINOR}; unknown fields may be lost")))
}

/// Directory name for a record: compact start timestamp and protocol name.
pub fn record_dir_name(record: &ProtocolRecord) -> String {
    let ts: String = record.started.chars().filter(|c| c.is_ascii_alphanumeric() || *c == '.').collect();
    format!("{}_{}", ts.replace('.', ""), record.kind.name())
}

/// Write `record` into a new directory under `root` and return its path.
pub fn save_record(root: &Path, record: &ProtocolRecord) -> Result<PathBuf, RecordError> {
    fs::create_dir_all(root).map_err(io(root))?;
    let base = record_dir_name(record);
    let mut dir = root.join(&base);
    let mut k = 1;
    while dir.exists() {
        k += 1;
        dir = root.join(format!("{base}-{k}"));
    }
    fs::create_dir(&dir).map_err(io(&dir))?;
    save_record_into(&dir, record)?;
    Ok(dir)
}

/// Write `record` into an existing directory.
pub fn save_record_into(dir: &Path, record: &ProtocolRecord) -> Result<(), RecordError> {
    let trace = &record.trace;
    check_columns(&trace.columns)?;
    if let Some(r) = trace.rows.iter().find(|r| r.len() != trace.columns.len()) {
        return Err(RecordError::Format(format!("row with {} values in a {}-column trace", r.len(), trace.columns.len())));
    }
    if trace.rows.windows(2).any(|w| w[1][0] < w[0][0]) {
        return Err(RecordError::Format("first column is not monotone".into()));
    }
    let mut csv = trace_header(trace);
    for r in &trace.rows {
        csv += &trace_row(r);
    }
    let fit = fit_text(record.fit.as_ref(), &record.derived);
    let meta = Meta {
        schema: format!("{SCHEMA_MAJOR}.{SCHEMA_MINOR}"),
        kind: record.kind,
        seed: record.seed,
        started: record.started.clone(),
        finished: record.finished.clone(),
        clock_start: record.clock_start,
        focus_start: record.focus_start,
        partial: record.partial,
        notes: record.notes.clone(),
        integrity: Integrity {
            rows: trace.rows.len(),
            columns: trace.columns.len(),
            trace_sha256: sha256_hex(csv.as_bytes()),
            fit_sha256: sha256_hex(fit.as_bytes()),
        },
        params: record.params.clone(),
        config: record.config.clone(),
    };
    let meta_text = toml::to_string(&meta).map_err(|e| RecordError::Format(e.to_string()))?;
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(io(&p))
    };
    write(TRACE_FILE, &csv)?;
    write(FIT_FILE, &fit)?;
    let tmp = dir.join(format!("{META_FILE}.tmp"));
    fs::write(&tmp, meta_text).map_err(io(&tmp))?;
    let meta_path = dir.join(META_FILE);
    fs::rename(&tmp, &meta_path).map_err(io(&meta_path))
}

/// A loaded record plus compatibility warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRecord {
    pub record: ProtocolRecord,
    pub warnings: Vec<String>,
}

/// Read a record directory, verifying hashes and schema versions.
pub fn load_record(dir: &Path) -> Result<LoadedRecord, RecordError> {
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(io(&meta_path))?;
    let value: toml::Table = toml::from_str(&meta_text).map_err(|e| RecordError::Format(format!("meta.txt: {}", e.message())))?;
    let version = value.get("schema").and_then(|v| v.as_str()).ok_or_else(|| RecordError::Format("meta.txt has no schema".into()))?;
    let mut warnings: Vec<String> = check_schema(version)?.into_iter().collect();
    let meta: Meta = if warnings.is_empty() {
        toml::from_str(&meta_text).map_err(|e| RecordError::Format(format!("meta.txt: {}", e.message())))?
    } else {
        known_fields(value, &mut warnings)?
    };
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(io(&p))
    };
    let csv = read(TRACE_FILE)?;
    let fit = read(FIT_FILE)?;
    if sha256_hex(csv.as_bytes()) != meta.integrity.trace_sha256 {
        return Err(RecordError::Integrity("trace.csv does not match its recorded hash".into()));
    }
    if sha256_hex(fit.as_bytes()) != meta.integrity.fit_sha256 {
        return Err(RecordError::Integrity("fit.txt does not match its recorded hash".into()));
    }
    let trace = parse_trace(&csv, false)?;
    if trace.rows.len() != meta.integrity.rows || trace.columns.len() != meta.integrity.columns {
        return Err(RecordError::Integrity(format!(
            "trace has {}x{} values, meta records {}x{}",
            trace.rows.len(),
            trace.columns.len(),
            meta.integrity.rows,
            meta.integrity.columns
        )));
    }
    let (fit, derived) = parse_fit(&fit)?;
    meta.config.validate().map_err(|e| RecordError::Format(format!("stored config: {e}")))?;
    let record = ProtocolRecord {
        kind: meta.kind,
        config: meta.config,
        params: meta.params,
        seed: meta.seed,
        clock_start: meta.clock_start,
        focus_start: meta.focus_start,
        started: meta.started,
        finished: meta.finished,
        trace,
        fit,
        derived,
        notes: meta.notes,
        partial: meta.partial,
    };
    Ok(LoadedRecord { record, warnings })
}

/// Drop top-level meta keys this version does not know and parse the rest.
fn known_fields(mut value: toml::Table, warnings: &mut Vec<String>) -> Result<Meta, RecordError> {
    const KNOWN: [&str; 12] =
        ["schema", "kind", "seed", "started", "finished", "clock_start", "focus_start", "partial", "notes", "integrity", "params", "config"];
    let unknown: Vec<String> = value.keys().filter(|k| !KNOWN.contains(&k.as_str())).cloned().collect();
    for k in unknown {
        value.remove(&k);
        warnings.push(format!("ignored unknown meta field {k:?}"));
    }
    value.try_into().map_err(|e: toml::de::Error| RecordError::Format(format!("meta.txt: {}", e.message())))
}

/// Most recent finished record of one of `kinds` under `root`.
pub fn latest_record(root: &Path, kinds: &[ProtocolKind]) -> Option<PathBuf> {
    let mut found: Vec<((String, u32), PathBuf)> = fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(META_FILE).is_file())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let (stem, n) = match name.rsplit_once('-').and_then(|(s, n)| Some((s, n.parse::<u32>().ok()?))) {
                Some((s, n)) => (s.to_string(), n),
                None => (name.clone(), 1),
            };
            let kind = stem.split_once('_').map(|(_, k)| k.to_string())?;
            kinds.iter().any(|k| k.name() == kind).then(|| ((stem, n), e.path()))
        })
        .collect();
    found.sort();
    found.pop().map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ProtocolRecord {
        let mut derived = BTreeMap::new();
        derived.insert("pi_s".into(), 1.0 / 3.0 * 3e-7);
        derived.insert("rabi_frequency_hz".into(), 5.000000000000001e6);
        ProtocolRecord {
            kind: ProtocolKind::Rabi,
            config: LabConfig { seed: 7, ..Default::default() },
            params: ProtocolParams { repeats: Some(10), ..Default::default() },
            seed: 7,
            clock_start: 0.125,
            focus_start: [0.1, -0.2, 0.0],
            started: "2026-01-02T03:04:05.678Z".into(),
            finished: "2026-01-02T03:04:06.000Z".into(),
            trace: TraceData {
                columns: vec![Column { name: "tau".into(), unit: "s".into() }, Column { name: "signal".into(), unit: "1".into() }],
                rows: (0..5).map(|i| vec![i as f64 * 4e-9, 1.0 - 0.1 * (i as f64).sin()]).collect(),
                sample_period: Some(5e-9),
            },
            fit: Some(FitResult {
                model: FitModel::DampedCosine,
                params: vec![("amplitude".into(), 0.05), ("frequency".into(), 5e6), ("phase".into(), -0.1), ("decay".into(), 1e-6), ("offset".into(), 0.97)],
                residual_rms: 1e-3,
                converged: true,
                iterations: 9,
            }),
            derived,
            notes: vec!["a note, with \"quotes\"".into()],
            partial: false,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        let p = save_record(dir.path(), &r).unwrap();
        assert_eq!(p.file_name().unwrap().to_str().unwrap(), "20260102T030405678Z_rabi");
        let l = load_record(&p).unwrap();
        assert!(l.warnings.is_empty());
        assert_eq!(l.record, r);
    }

    #[test]
    fn no_fit_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = sample();
        r.fit = None;
        r.trace.sample_period = None;
        let p = save_record(dir.path(), &r).unwrap();
        assert_eq!(load_record(&p).unwrap().record, r);
    }

    #[test]
    fn truncated_trace_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = save_record(dir.path(), &sample()).unwrap();
        let csv = fs::read_to_string(p.join(TRACE_FILE)).unwrap();
        fs::write(p.join(TRACE_FILE), &csv[..csv.len() - 7]).unwrap();
        assert!(matches!(load_record(&p), Err(RecordError::Integrity(_))));
    }

    #[test]
    fn edited_fit_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = save_record(dir.path(), &sample()).unwrap();
        let fit = fs::read_to_string(p.join(FIT_FILE)).unwrap().replace("iterations = 9", "iterations = 8");
        fs::write(p.join(FIT_FILE), fit).unwrap();
        assert!(matches!(load_record(&p), Err(RecordError::Integrity(_))));
    }

    #[test]
    fn newer_minor_loads_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        let p = save_record(dir.path(), &r).unwrap();
        let meta = fs::read_to_string(p.join(META_FILE)).unwrap();
        let meta = format!("operator = \"ana\"\n{}", meta.replace("schema = \"1.0\"", "schema = \"1.3\""));
        fs::write(p.join(META_FILE), meta).unwrap();
        let l = load_record(&p).unwrap();
        assert_eq!(l.record, r);
        assert_eq!(l.warnings.len(), 2, "{:?}", l.warnings);
    }

    #[test]
    fn other_major_is_migration_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = save_record(dir.path(), &sample()).unwrap();
        let meta = fs::read_to_string(p.join(META_FILE)).unwrap().replace("schema = \"1.0\"", "schema = \"2.0\"");
        fs::write(p.join(META_FILE), meta).unwrap();
        assert!(matches!(load_record(&p), Err(RecordError::Migration { .. })));
    }

    #[test]
    fn missing_unit_rejected() {
        let text = "# virtlab-trace 1.0\n# units: s\n# sample_period: none\ntau,signal\n0,1\n";
        assert!(matches!(parse_trace(text, false), Err(RecordError::Format(_))));
    }

    #[test]
    fn writer_prefix_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRACE_FILE);
        let cols = vec![Column { name: "t".into(), unit: "s".into() }, Column { name: "v".into(), unit: "counts".into() }];
        let mut w = TraceWriter::create(&path, &cols, None).unwrap();
        assert!(read_trace_prefix(&path).unwrap().rows.is_empty());
        for i in 0..3 {
            w.append(&[i as f64, 10.0 * i as f64]).unwrap();
            assert_eq!(read_trace_prefix(&path).unwrap().rows.len(), i + 1);
        }
        assert!(w.append(&[0.5, 1.0]).is_err());
        // a half-written row is not part of the prefix
        let mut f = fs::OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"3.0,3").unwrap();
        assert_eq!(read_trace_prefix(&path).unwrap().rows.len(), 3);
        assert!(read_trace(&path).is_err());
    }

    #[test]
    fn latest_record_by_kind() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = sample();
        let a = save_record(dir.path(), &r).unwrap();
        let b = save_record(dir.path(), &r).unwrap();
        r.kind = ProtocolKind::T1;
        r.started = "2027-01-01T00:00:00.000Z".into();
        save_record(dir.path(), &r).unwrap();
        assert_ne!(a, b);
        assert_eq!(latest_record(dir.path(), &[ProtocolKind::Rabi]), Some(b));
        assert_eq!(latest_record(dir.path(), &[ProtocolKind::HahnEcho]), None);
    }
}
