//! Experiment recipes. Each protocol compiles its sequence, runs it through
//! the acquisition engine, fits the result and returns a [`ProtocolRecord`]
//! that can be persisted and replayed.
//!
//! The characterization workflow runs `confocal_map`, `cw_odmr`, `rabi` (or
//! `pi_calibration`) and then `t1`, `ramsey` and `hahn_echo`; the last three
//! refuse to run without a pi duration.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::config::LabConfig;
use crate::dsp::{common_mode_reject, fit, fit_fixed, noise_estimate, pi_calibration_analysis, DspError, FitModel, FitResult};
use crate::engine::{run_cw, run_pulsed, run_scan, CwRequest, EngineError, Hooks, PulsedRequest, RawRun, RunConfig, ScanRequest, VirtualLab};
use crate::instruments::{AxisPlan, DetectorKind, ScanPlan};
use crate::rng::SeedTree;
use crate::sequence::{compile, Averaging, SeqError, SequenceKind, SequenceSpec, SyncMethod};
use crate::spin::{resonance_frequencies, ResonanceLine, SpinError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    ConfocalMap,
    CwOdmr,
    Rabi,
    T1,
    Ramsey,
    HahnEcho,
    PiCalibration,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 7] = [
        ProtocolKind::ConfocalMap,
        ProtocolKind::CwOdmr,
        ProtocolKind::Rabi,
        ProtocolKind::T1,
        ProtocolKind::Ramsey,
        ProtocolKind::HahnEcho,
        ProtocolKind::PiCalibration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::ConfocalMap => "confocal_map",
            ProtocolKind::CwOdmr => "cw_odmr",
            ProtocolKind::Rabi => "rabi",
            ProtocolKind::T1 => "t1",
            ProtocolKind::Ramsey => "ramsey",
            ProtocolKind::HahnEcho => "hahn_echo",
            ProtocolKind::PiCalibration => "pi_calibration",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the protocol needs a pi duration from a rabi or pi_calibration record.
    pub fn needs_pi(self) -> bool {
        matches!(self, ProtocolKind::T1 | ProtocolKind::Ramsey | ProtocolKind::HahnEcho)
    }

    /// Kinds whose records can supply the pi duration.
    pub fn pi_sources() -> [ProtocolKind; 2] {
        [ProtocolKind::Rabi, ProtocolKind::PiCalibration]
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("{protocol} needs a pi duration: run rabi or pi_calibration first")]
    Dependency { protocol: String },
    #[error("no emitter above the noise floor near {position:?} um")]
    LostTarget { position: [f64; 3] },
    #[error("no resonance found in any spectrum")]
    NoSignal,
    #[error("invalid protocol parameters: {0}")]
    Params(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Sequence(#[from] SeqError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Spin(#[from] SpinError),
}

impl ProtocolError {
    /// Short machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::Dependency { .. } => "dependency",
            ProtocolError::LostTarget { .. } => "lost_target",
            ProtocolError::NoSignal => "no_signal",
            ProtocolError::Params(_) => "params",
            ProtocolError::Fit(_) => "fit",
            ProtocolError::Engine(_) => "engine",
            ProtocolError::Sequence(_) => "sequence",
            ProtocolError::Dsp(_) => "analysis",
            ProtocolError::Spin(_) => "spin",
        }
    }
}

/// Tunable knobs of a protocol run. Unset values take per-protocol defaults.
///
/// Sweep values are in SI units of the swept quantity: Hz for `cw_odmr`,
/// seconds for pulsed protocols, um for `confocal_map` (where `start`/`stop`
/// are offsets from the current focus).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolParams {
    pub repeats: Option<u32>,
    pub start: Option<f64>,
    pub stop: Option<f64>,
    pub step: Option<f64>,
    pub points: Option<usize>,
    /// Geometric instead of linear sweep spacing.
    pub log_sweep: Option<bool>,
    /// Integration time per CW point or scan pixel (s).
    pub dwell: Option<f64>,
    /// Drive frequency; defaults to the heaviest resonance line.
    pub mw_frequency: Option<f64>,
    pub mw_power_dbm: Option<f64>,
    pub laser_power: Option<f64>,
    /// Ramsey drive offset from the target line (Hz).
    pub detuning: f64,
    pub pi: Option<f64>,
    pub averaging: Averaging,
    pub sync: SyncMethod,
    pub blind: bool,
    /// Alternate a final 3pi/2 pulse in ramsey and hahn_echo.
    pub alternate: bool,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            repeats: None,
            start: None,
            stop: None,
            step: None,
            points: None,
            log_sweep: None,
            dwell: None,
            mw_frequency: None,
            mw_power_dbm: None,
            laser_power: None,
            detuning: 2e6,
            pi: None,
            averaging: Averaging::Pn,
            sync: SyncMethod::Method2,
            blind: false,
            alternate: true,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: &str| Err(ProtocolError::Params(m.into()));
        if self.repeats == Some(0) {
            return bad("repeats must be at least 1");
        }
        if self.points.is_some_and(|p| p < 2) {
            return bad("points must be at least 2");
        }
        if self.step.is_some_and(|s| !(s > 0.0)) {
            return bad("step must be positive");
        }
        if let (Some(a), Some(b)) = (self.start, self.stop) {
            if !(b > a) {
                return bad("stop must exceed start");
            }
        }
        if self.dwell.is_some_and(|d| !(d > 0.0)) {
            return bad("dwell must be positive");
        }
        if self.pi.is_some_and(|p| !(p > 0.0)) {
            return bad("pi must be positive");
        }
        if self.laser_power.is_some_and(|p| !(p > 0.0)) {
            return bad("laser_power must be positive");
        }
        if !self.detuning.is_finite() {
            return bad("detuning must be finite");
        }
        Ok(())
    }

    fn sweep(&self, start: f64, stop: f64, step: f64, log: bool, points: usize) -> Result<Vec<f64>, ProtocolError> {
        let a = self.start.unwrap_or(start);
        let b = self.stop.unwrap_or(stop);
        if !(b > a) {
            return Err(ProtocolError::Params(format!("empty sweep [{a}, {b}]")));
        }
        if self.log_sweep.unwrap_or(log) {
            if !(a > 0.0) {
                return Err(ProtocolError::Params("a geometric sweep needs a positive start".into()));
            }
            let n = self.points.unwrap_or(points);
            let r = (b / a).ln() / (n - 1) as f64;
            return Ok((0..n).map(|k| a * (r * k as f64).exp()).collect());
        }
        let n = match (self.points, self.step) {
            (Some(n), _) => n,
            (None, s) => ((b - a) / s.unwrap_or(step) + 1e-9).floor() as usize + 1,
        };
        let d = match self.points {
            Some(n) => (b - a) / (n - 1) as f64,
            None => self.step.unwrap_or(step),
        };
        Ok((0..n).map(|k| a + d * k as f64).collect())
    }
}

/// One column of a record's numeric payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub unit: String,
}

impl Column {
    fn new(name: &str, unit: &str) -> Self {
        Self { name: name.into(), unit: unit.into() }
    }
}

/// Columnar numeric data; the first column is monotone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceData {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<f64>>,
    /// Sample period or tag resolution of the underlying acquisition (s).
    pub sample_period: Option<f64>,
}

impl TraceData {
    fn from_columns(columns: Vec<Column>, data: Vec<Vec<f64>>, sample_period: Option<f64>) -> Self {
        let n = data.first().map_or(0, |c| c.len());
        let rows = (0..n).map(|i| data.iter().map(|c| c[i]).collect()).collect();
        Self { columns, rows, sample_period }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c.name == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// Outcome of one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRecord {
    pub kind: ProtocolKind,
    /// Lab configuration before any protocol overrides.
    pub config: LabConfig,
    pub params: ProtocolParams,
    pub seed: u64,
    /// Lab clock and focus when the run started.
    pub clock_start: f64,
    pub focus_start: [f64; 3],
    pub started: String,
    pub finished: String,
    pub trace: TraceData,
    pub fit: Option<FitResult>,
    /// Named physics outputs (SI units, positions in um).
    pub derived: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub partial: bool,
}

struct Outcome {
    trace: TraceData,
    fit: Option<FitResult>,
    derived: BTreeMap<String, f64>,
    notes: Vec<String>,
    partial: bool,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Heaviest resonance line (lowest frequency on ties).
pub fn target_line(cfg: &LabConfig) -> Result<ResonanceLine, ProtocolError> {
    let lines = resonance_frequencies(&cfg.spin, &cfg.field.bias())?;
    let mut best = lines[0].clone();
    for l in &lines[1..] {
        if l.weight > best.weight + 1e-12 {
            best = l.clone();
        }
    }
    Ok(best)
}

fn run_seed(cfg: &LabConfig, kind: ProtocolKind, key: u64) -> u64 {
    SeedTree::new(cfg.seed).child(kind as u64 + 1).child(key).root()
}

/// Run one protocol on `lab`.
pub fn run_protocol(
    lab: &mut VirtualLab,
    kind: ProtocolKind,
    params: &ProtocolParams,
    hooks: &dyn Hooks,
) -> Result<ProtocolRecord, ProtocolError> {
    params.validate()?;
    if kind.needs_pi() && params.pi.is_none() {
        return Err(ProtocolError::Dependency { protocol: kind.name().into() });
    }
    let base = lab.cfg.clone();
    let clock_start = lab.clock;
    let focus_start = lab.focus;
    let started = now();
    let mut cfg = base.clone();
    if let Some(p) = params.mw_power_dbm {
        cfg.mw.power_dbm = p;
    }
    if let Some(p) = params.laser_power {
        cfg.laser.set_power = p;
    }
    let pulsed = !matches!(kind, ProtocolKind::ConfocalMap | ProtocolKind::CwOdmr);
    if pulsed {
        let target = match params.mw_frequency {
            Some(f) => f,
            None => target_line(&cfg)?.frequency,
        };
        cfg.mw.frequency_hz = if kind == ProtocolKind::Ramsey { target + params.detuning } else { target };
    }
    lab.cfg = cfg;
    let out = match kind {
        ProtocolKind::ConfocalMap => confocal_map(lab, params, hooks),
        ProtocolKind::CwOdmr => cw_odmr(lab, params, hooks),
        _ => pulsed_protocol(lab, kind, params, hooks),
    };
    lab.cfg = base.clone();
    let mut out = out?;
    if pulsed {
        if let Some(pi) = params.pi.or_else(|| out.derived.get("pi_s").copied()) {
            if pi > base.spin.t2_star {
                out.notes.push(format!("pi pulse {pi:e} s is longer than T2* = {:e} s", base.spin.t2_star));
            }
        }
    }
    Ok(ProtocolRecord {
        kind,
        seed: base.seed,
        config: base,
        params: params.clone(),
        clock_start,
        focus_start,
        started,
        finished: now(),
        trace: out.trace,
        fit: out.fit,
        derived: out.derived,
        notes: out.notes,
        partial: out.partial,
    })
}

/// Re-run a record from its stored configuration, seed and starting state.
pub fn replay(record: &ProtocolRecord, hooks: &dyn Hooks) -> Result<ProtocolRecord, ProtocolError> {
    let mut lab = VirtualLab::new(record.config.clone());
    lab.clock = record.clock_start;
    lab.focus = record.focus_start;
    run_protocol(&mut lab, record.kind, &record.params, hooks)
}

/// Names of derived values that differ bit-wise between two records.
pub fn derived_mismatches(a: &ProtocolRecord, b: &ProtocolRecord) -> Vec<String> {
    let mut keys: Vec<&String> = a.derived.keys().chain(b.derived.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| a.derived.get(*k).map(|v| v.to_bits()) != b.derived.get(*k).map(|v| v.to_bits()))
        .cloned()
        .collect()
}

fn confocal_map(lab: &mut VirtualLab, p: &ProtocolParams, hooks: &dyn Hooks) -> Result<Outcome, ProtocolError> {
    let f = lab.focus;
    let offsets = p.sweep(-2.0, 2.0, 0.1, false, 41)?;
    let axis = |c: f64| AxisPlan { start: c + offsets[0], stop: c + offsets[offsets.len() - 1], points: offsets.len() };
    let plan = ScanPlan { x: axis(f[0]), y: axis(f[1]), z: AxisPlan::fixed(f[2]) };
    let mut run = RunConfig::for_protocol(&lab.cfg, "confocal_map");
    run.seed = run_seed(&lab.cfg, ProtocolKind::ConfocalMap, 0);
    let dwell = p.dwell.unwrap_or(1e-3);
    let r = run_scan(lab, &ScanRequest { run, plan, dwell }, hooks)?;
    let n = r.image.len();
    let mut cols = vec![Vec::with_capacity(n); 4];
    for k in 0..n {
        let pos = plan.position(k);
        cols[0].push(r.t_start + k as f64 * dwell);
        cols[1].push(pos[0]);
        cols[2].push(pos[1]);
        cols[3].push(pos[2]);
    }
    cols.push(r.image.clone());
    let unit = signal_unit(lab, "confocal_map");
    let trace = TraceData::from_columns(
        vec![Column::new("t", "s"), Column::new("x", "um"), Column::new("y", "um"), Column::new("z", "um"), Column::new("signal", unit)],
        cols,
        Some(dwell),
    );
    let mut derived = BTreeMap::new();
    if let Some((k, pos)) = r.argmax() {
        derived.insert("peak_x_um".into(), pos[0]);
        derived.insert("peak_y_um".into(), pos[1]);
        derived.insert("peak_z_um".into(), pos[2]);
        derived.insert("peak_signal".into(), r.image[k]);
        if !r.partial {
            lab.focus = pos;
        }
    }
    Ok(Outcome { trace, fit: None, derived, notes: Vec::new(), partial: r.partial })
}

fn signal_unit(lab: &VirtualLab, protocol: &str) -> &'static str {
    let det = &lab.cfg.wiring.route(protocol).detector;
    match lab.cfg.detectors.get(det).map(|d| d.kind) {
        Some(DetectorKind::AnalogPd) => "V",
        _ => "counts",
    }
}

/// Predicted line nearest to `f` within `tol`.
fn assign<'a>(lines: &'a [ResonanceLine], f: f64, tol: f64) -> Option<&'a ResonanceLine> {
    lines
        .iter()
        .min_by(|a, b| (a.frequency - f).abs().total_cmp(&(b.frequency - f).abs()))
        .filter(|l| (l.frequency - f).abs() <= tol)
}

fn cw_odmr(lab: &mut VirtualLab, p: &ProtocolParams, hooks: &dyn Hooks) -> Result<Outcome, ProtocolError> {
    let lines = resonance_frequencies(&lab.cfg.spin, &lab.cfg.field.bias())?;
    let lo = lines.first().map_or(lab.cfg.spin.d_zfs, |l| l.frequency) - 5e6;
    let hi = lines.last().map_or(lab.cfg.spin.d_zfs, |l| l.frequency) + 5e6;
    let grid = p.sweep(lo, hi, 0.1e6, false, 2)?;
    let mut run = RunConfig::for_protocol(&lab.cfg, "cw_odmr");
    run.repeats = p.repeats.unwrap_or(20);
    run.seed = run_seed(&lab.cfg, ProtocolKind::CwOdmr, 0);
    let dwell = p.dwell.unwrap_or(lab.cfg.mw.min_dwell_s);
    let req = CwRequest { run, grid: grid.clone(), dwell, mw_on: true };
    let r = run_cw(lab, &req, hooks)?;
    let mut notes: Vec<String> = r.violations.iter().map(|v| format!("mw timing: {v:?}")).collect();
    let unit = signal_unit(lab, "cw_odmr");
    let trace = TraceData::from_columns(
        vec![Column::new("frequency", "Hz"), Column::new("pl", unit), Column::new("contrast", "1")],
        vec![r.freqs.clone(), r.pl.clone(), r.contrast.clone()],
        Some(dwell),
    );
    let fitted = fit(FitModel::LorentzianMulti, &r.freqs, &r.contrast, None)?;
    let mut dips: Vec<(f64, f64, f64)> = fitted.values()[1..].chunks(3).map(|d| (d[0], d[1].abs(), d[2])).collect();
    dips.sort_by(|a, b| a.0.total_cmp(&b.0));
    let step = grid.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let mut derived = BTreeMap::new();
    derived.insert("n_lines".into(), dips.len() as f64);
    for (i, &(c, w, depth)) in dips.iter().enumerate() {
        derived.insert(format!("line_{i}_hz"), c);
        derived.insert(format!("line_{i}_fwhm_hz"), w);
        derived.insert(format!("line_{i}_contrast"), depth);
        match assign(&lines, c, w.max(3.0 * step)) {
            Some(l) => {
                derived.insert(format!("line_{i}_predicted_hz"), l.frequency);
            }
            None => notes.push(format!("line {i} at {c:.6e} Hz matches no predicted resonance")),
        }
    }
    if !dips.is_empty() {
        derived.insert("fwhm_hz".into(), dips.iter().map(|d| d.1).sum::<f64>() / dips.len() as f64);
        derived.insert("contrast".into(), dips.iter().map(|d| d.2).fold(0.0, f64::max));
    }
    if !fitted.converged {
        notes.push("lorentzian fit did not converge".into());
    }
    Ok(Outcome { trace, fit: Some(fitted), derived, notes, partial: r.partial })
}

struct PulsedData {
    raw: RawRun,
    /// Normalized signal/reference ratio, `[variant][param]`.
    norm: Vec<Vec<f64>>,
    /// Signal-window counts per readout, `[variant][param]`.
    sums: Vec<Vec<f64>>,
}

fn acquire(lab: &mut VirtualLab, kind: ProtocolKind, spec: SequenceSpec, p: &ProtocolParams, repeats: u32, hooks: &dyn Hooks) -> Result<PulsedData, ProtocolError> {
    let mut run = RunConfig::for_protocol(&lab.cfg, kind.name());
    run.averaging = p.averaging;
    run.sync = p.sync;
    run.blind = p.blind;
    run.repeats = p.repeats.unwrap_or(repeats);
    run.seed = run_seed(&lab.cfg, kind, 0);
    let seq = compile(&spec, &lab.cfg.pulser, run.sync, run.averaging, run.repeats)?;
    let raw = run_pulsed(lab, &PulsedRequest { seq, run: run.clone() }, hooks)?;
    let plan = run.plan.excluding(lab.cfg.engine.early_exclusion as f64 * raw.hist_dt);
    let norm = raw.signals(&plan)?;
    let sums = raw.signal_window_sums(&plan);
    Ok(PulsedData { raw, norm, sums })
}

fn pulsed_protocol(lab: &mut VirtualLab, kind: ProtocolKind, p: &ProtocolParams, hooks: &dyn Hooks) -> Result<Outcome, ProtocolError> {
    let mut fixed = lab.cfg.timings;
    if let Some(pi) = p.pi {
        fixed.pi_len = Some(pi);
        fixed.pi_half_len = Some(pi / 2.0);
    }
    let (seq_kind, sweep, repeats) = match kind {
        ProtocolKind::Rabi => (SequenceKind::Rabi, p.sweep(0.0, 400e-9, 4e-9, false, 101)?, 40_000),
        ProtocolKind::PiCalibration => (SequenceKind::PiCalibration, p.sweep(60e-9, 140e-9, 5e-9, false, 17)?, 200_000),
        ProtocolKind::T1 => (SequenceKind::T1Alternating, p.sweep(10e-6, 10e-3, 0.0, true, 20)?, 100_000),
        ProtocolKind::Ramsey => (SequenceKind::Ramsey, p.sweep(0.0, 4e-6, 25e-9, false, 161)?, 40_000),
        ProtocolKind::HahnEcho => (SequenceKind::HahnEcho, p.sweep(2e-6, 122e-6, 4e-6, false, 31)?, 200_000),
        ProtocolKind::ConfocalMap | ProtocolKind::CwOdmr => unreachable!("not a pulsed protocol"),
    };
    let mut spec = SequenceSpec::new(seq_kind, sweep);
    spec.fixed = fixed;
    spec.options.alternate_final_3pi2 = p.alternate;
    let d = acquire(lab, kind, spec, p, repeats, hooks)?;
    let x = d.raw.params.clone();
    let alt = d.raw.variants.len() > 1;
    let unit = signal_unit(lab, kind.name());
    let mut columns = vec![Column::new("tau", "s"), Column::new("s0_counts", unit), Column::new("s0_norm", "1")];
    let mut data = vec![x.clone(), d.sums[0].clone(), d.norm[0].clone()];
    if alt {
        columns.push(Column::new("s1_counts", unit));
        columns.push(Column::new("s1_norm", "1"));
        data.push(d.sums[1].clone());
        data.push(d.norm[1].clone());
    }
    let mut derived = BTreeMap::new();
    let mut notes = d.raw.log.clone();
    let fit_model;
    let y: Vec<f64> = match kind {
        ProtocolKind::T1 => {
            fit_model = Some(FitModel::ExpDecay);
            common_mode_reject(&d.sums[0], &d.sums[1])?.normalized
        }
        ProtocolKind::PiCalibration => {
            fit_model = None;
            let c = pi_calibration_analysis(&x, &d.norm[0], &d.norm[1])?;
            derived.insert("pi_s".into(), c.refined);
            derived.insert("pi_scan_s".into(), c.optimum);
            derived.insert("argmax_half_s".into(), c.argmax_half);
            derived.insert("argmin_3half_s".into(), c.argmin_3half);
            if c.disagreement {
                notes.push("pi/2 and 3pi/2 echo extrema disagree by more than one scan step".into());
            }
            d.norm[0].iter().zip(&d.norm[1]).map(|(a, b)| a - b).collect()
        }
        ProtocolKind::Rabi => {
            fit_model = Some(FitModel::DampedCosine);
            d.norm[0].clone()
        }
        _ => {
            fit_model = Some(if kind == ProtocolKind::Ramsey { FitModel::DampedCosine } else { FitModel::ExpDecay });
            if alt {
                common_mode_reject(&d.sums[0], &d.sums[1])?.normalized
            } else {
                d.norm[0].clone()
            }
        }
    };
    columns.push(Column::new("signal", "1"));
    data.push(y.clone());
    let mut fitted = None;
    if let Some(model) = fit_model {
        // the common-mode signal of alternating sequences decays to zero
        let held: &[(&str, f64)] = if alt && kind != ProtocolKind::Rabi { &[("offset", 0.0)] } else { &[] };
        let f = fit_fixed(model, &x, &y, None, held)?;
        if !f.converged {
            notes.push(format!("{} fit did not converge", model.name()));
        }
        let get = |n: &str| f.get(n).unwrap_or(f64::NAN);
        match kind {
            ProtocolKind::Rabi => {
                let freq = get("frequency").abs();
                if !(freq > 0.0) {
                    return Err(ProtocolError::Fit("rabi fit found no oscillation".into()));
                }
                derived.insert("rabi_frequency_hz".into(), freq);
                derived.insert("pi_s".into(), 0.5 / freq);
                derived.insert("pi_half_s".into(), 0.25 / freq);
                derived.insert("contrast".into(), 2.0 * get("amplitude").abs());
                derived.insert("decay_s".into(), get("decay"));
            }
            ProtocolKind::T1 => {
                derived.insert("t1_s".into(), get("T"));
            }
            ProtocolKind::Ramsey => {
                derived.insert("detuning_hz".into(), get("frequency").abs());
                derived.insert("t2_star_s".into(), get("decay"));
            }
            ProtocolKind::HahnEcho => {
                derived.insert("t2_s".into(), get("T"));
            }
            _ => {}
        }
        fitted = Some(f);
    }
    if let Some(snr) = d.raw.snr_history.last() {
        derived.insert("snr".into(), *snr);
    }
    let trace = TraceData::from_columns(columns, data, Some(d.raw.hist_dt));
    Ok(Outcome { trace, fit: fitted, derived, notes, partial: d.raw.partial })
}

/// Settings of a tracking scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSettings {
    pub radius_um: f64,
    pub step_um: f64,
    pub dwell: f64,
}

impl Default for TrackSettings {
    fn default() -> Self {
        Self { radius_um: 1.5, step_um: 0.2, dwell: 1e-3 }
    }
}

/// Relocate an emitter near `last` with a local xy scan followed by a z line
/// scan, and move the lab focus onto it.
pub fn track_emitter(lab: &mut VirtualLab, last: [f64; 3], settings: &TrackSettings, hooks: &dyn Hooks) -> Result<[f64; 3], ProtocolError> {
    let TrackSettings { radius_um: r, step_um: s, dwell } = *settings;
    if !(r > 0.0) || !(s > 0.0) || !(dwell > 0.0) {
        return Err(ProtocolError::Params("tracking radius, step and dwell must be positive".into()));
    }
    let n = (2.0 * r / s).round() as usize + 1;
    let range = lab.cfg.scanner.range_um;
    let axis = |a: usize, c: f64| {
        let lo = (c - r).max(range[a][0]);
        let hi = (c + r).min(range[a][1]);
        AxisPlan { start: lo, stop: hi, points: (((hi - lo) / s).round() as usize + 1).min(n) }
    };
    let route = lab.cfg.wiring.route("confocal_map").clone();
    let digital = lab.cfg.detectors.get(&route.detector).is_some_and(|d| d.kind == DetectorKind::DigitalPc);
    let key = lab.clock.to_bits();
    let mut run = RunConfig::for_protocol(&lab.cfg, "confocal_map");
    run.seed = run_seed(&lab.cfg, ProtocolKind::ConfocalMap, key);
    let plan = ScanPlan { x: axis(0, last[0]), y: axis(1, last[1]), z: AxisPlan::fixed(last[2]) };
    let img = run_scan(lab, &ScanRequest { run: run.clone(), plan, dwell }, hooks)?;
    let mut sorted = img.image.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let max = sorted[sorted.len() - 1];
    let mut sigma = noise_estimate(&sorted[..sorted.len().div_ceil(2)]);
    if digital {
        sigma = sigma.max(median.max(1.0).sqrt());
    }
    if max - median < 5.0 * sigma {
        return Err(ProtocolError::LostTarget { position: last });
    }
    let (_, xy) = img.argmax().ok_or(ProtocolError::LostTarget { position: last })?;
    run.seed = run_seed(&lab.cfg, ProtocolKind::ConfocalMap, key ^ 0x7A);
    let plan = ScanPlan { x: AxisPlan::fixed(xy[0]), y: AxisPlan::fixed(xy[1]), z: axis(2, last[2]) };
    let line = run_scan(lab, &ScanRequest { run, plan, dwell }, hooks)?;
    let (_, pos) = line.argmax().ok_or(ProtocolError::LostTarget { position: last })?;
    lab.focus = pos;
    Ok(pos)
}

/// Grid of an optimization sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CwGrid {
    pub mw_powers_dbm: Vec<f64>,
    pub laser_powers: Vec<f64>,
    /// Allowed relative FWHM excess over the narrowest line.
    pub tol: f64,
    /// Half span (Hz) of each spectrum around the target line.
    pub half_span: f64,
}

impl Default for CwGrid {
    fn default() -> Self {
        Self { mw_powers_dbm: vec![-20.0, -15.0, -10.0], laser_powers: vec![0.5e-3, 1e-3, 2e-3], tol: 0.2, half_span: 5e6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwPoint {
    pub mw_power_dbm: f64,
    pub laser_power: f64,
    pub rabi_hz: f64,
    /// NaN when no dip was found.
    pub fwhm_hz: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwRecommendation {
    pub points: Vec<CwPoint>,
    pub laser_power: f64,
    pub mw_power_dbm: f64,
    pub fwhm_min_hz: f64,
}

/// Run `cw_odmr` around the target line at every grid point and recommend
/// the laser power of maximum contrast and the highest MW power whose
/// linewidth stays within `tol` of the narrowest.
pub fn optimize_cw(lab: &mut VirtualLab, grid: &CwGrid, params: &ProtocolParams, hooks: &dyn Hooks) -> Result<CwRecommendation, ProtocolError> {
    if grid.mw_powers_dbm.is_empty() || grid.laser_powers.is_empty() {
        return Err(ProtocolError::Params("optimization grid is empty".into()));
    }
    if !(grid.tol >= 0.0) || !(grid.half_span > 0.0) {
        return Err(ProtocolError::Params("tol must be non-negative and half_span positive".into()));
    }
    let target = match params.mw_frequency {
        Some(f) => f,
        None => target_line(&lab.cfg)?.frequency,
    };
    let mut points = Vec::new();
    for &laser in &grid.laser_powers {
        for &mw in &grid.mw_powers_dbm {
            let mut p = params.clone();
            p.mw_power_dbm = Some(mw);
            p.laser_power = Some(laser);
            p.start = Some(target - grid.half_span);
            p.stop = Some(target + grid.half_span);
            p.step = Some(params.step.unwrap_or(grid.half_span / 200.0));
            p.points = None;
            let rec = run_protocol(lab, ProtocolKind::CwOdmr, &p, hooks)?;
            let n = rec.derived["n_lines"] as usize;
            let best = (0..n).min_by(|&a, &b| {
                let fa = rec.derived[&format!("line_{a}_hz")];
                let fb = rec.derived[&format!("line_{b}_hz")];
                (fa - target).abs().total_cmp(&(fb - target).abs())
            });
            let (fwhm, contrast) = match best {
                Some(i) => (rec.derived[&format!("line_{i}_fwhm_hz")], rec.derived[&format!("line_{i}_contrast")]),
                None => (f64::NAN, 0.0),
            };
            let mut src = lab.mw_source();
            src.power_dbm = mw;
            points.push(CwPoint { mw_power_dbm: mw, laser_power: laser, rabi_hz: src.rabi_frequency(), fwhm_hz: fwhm, contrast });
        }
    }
    let best = points
        .iter()
        .filter(|q| q.fwhm_hz.is_finite())
        .max_by(|a, b| a.contrast.total_cmp(&b.contrast))
        .ok_or(ProtocolError::NoSignal)?;
    let laser_power = best.laser_power;
    let at_laser: Vec<&CwPoint> = points.iter().filter(|q| q.laser_power == laser_power && q.fwhm_hz.is_finite()).collect();
    let fwhm_min = at_laser.iter().map(|q| q.fwhm_hz).fold(f64::INFINITY, f64::min);
    let mw = at_laser
        .iter()
        .filter(|q| q.fwhm_hz <= (1.0 + grid.tol) * fwhm_min)
        .map(|q| q.mw_power_dbm)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(CwRecommendation { points, laser_power, mw_power_dbm: mw, fwhm_min_hz: fwhm_min })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::NoHooks;
    use crate::instruments::Emitter;

    #[test]
    fn names_round_trip() {
        for k in ProtocolKind::ALL {
            assert_eq!(ProtocolKind::parse(k.name()), Some(k));
        }
        assert_eq!(ProtocolKind::parse("xy8"), None);
    }

    #[test]
    fn dependent_protocols_need_pi() {
        let mut lab = VirtualLab::new(LabConfig::default());
        for k in [ProtocolKind::Ramsey, ProtocolKind::HahnEcho, ProtocolKind::T1] {
            let e = run_protocol(&mut lab, k, &ProtocolParams::default(), &NoHooks).unwrap_err();
            assert_eq!(e.code(), "dependency");
            assert!(e.to_string().contains("rabi"), "{e}");
        }
    }

    #[test]
    fn linear_and_log_sweeps() {
        let p = ProtocolParams::default();
        let s = p.sweep(0.0, 1.0, 0.25, false, 2).unwrap();
        assert_eq!(s, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = p.sweep(1.0, 100.0, 0.0, true, 3).unwrap();
        assert!((g[1] - 10.0).abs() < 1e-9 && (g[2] - 100.0).abs() < 1e-9);
        let q = ProtocolParams { points: Some(3), ..Default::default() };
        assert_eq!(q.sweep(0.0, 1.0, 0.1, false, 2).unwrap(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn heaviest_line_is_target() {
        let cfg = LabConfig::default();
        let t = target_line(&cfg).unwrap();
        assert!((t.weight - 0.375).abs() < 1e-12);
        assert!((t.frequency - (2.87e9 - 28e9 * 1e-3 / 3.0)).abs() < 1e3, "{}", t.frequency);
    }

    #[test]
    fn tracking_without_drift_stays() {
        let mut lab = VirtualLab::new(LabConfig::default());
        let pos = track_emitter(&mut lab, [0.0; 3], &TrackSettings::default(), &NoHooks).unwrap();
        for a in 0..3 {
            assert!(pos[a].abs() <= 0.2 + 1e-9, "{pos:?}");
        }
        assert_eq!(lab.focus, pos);
    }

    #[test]
    fn tracking_follows_linear_drift() {
        let mut cfg = LabConfig::default();
        cfg.sample.stage_drift = [0.1, 0.0, 0.0];
        let mut lab = VirtualLab::new(cfg);
        let s = TrackSettings { radius_um: 1.5, step_um: 0.2, dwell: 1e-3 };
        let mut pos = [0.0; 3];
        for _ in 0..10 {
            lab.clock += 10.0;
            pos = track_emitter(&mut lab, pos, &s, &NoHooks).unwrap();
            let truth = lab.cfg.sample.position_at(&lab.cfg.sample.emitters[0], lab.clock);
            let err = ((pos[0] - truth[0]).powi(2) + (pos[1] - truth[1]).powi(2)).sqrt();
            assert!(err <= 2.0 * s.step_um, "error {err} at {pos:?} vs {truth:?}");
        }
    }

    #[test]
    fn removed_emitter_is_lost() {
        let mut cfg = LabConfig::default();
        cfg.sample.emitters.clear();
        let mut lab = VirtualLab::new(cfg);
        let e = track_emitter(&mut lab, [0.0; 3], &TrackSettings::default(), &NoHooks).unwrap_err();
        assert_eq!(e.code(), "lost_target");
    }

    #[test]
    fn confocal_map_moves_focus() {
        let mut cfg = LabConfig::default();
        cfg.sample.emitters = vec![Emitter { position_um: [0.5, -0.3, 0.0], n_centers: 50.0 }];
        let mut lab = VirtualLab::new(cfg);
        let r = run_protocol(&mut lab, ProtocolKind::ConfocalMap, &ProtocolParams::default(), &NoHooks).unwrap();
        assert!((r.derived["peak_x_um"] - 0.5).abs() < 1e-9);
        assert!((r.derived["peak_y_um"] + 0.3).abs() < 1e-9);
        assert!((lab.focus[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn optimize_single_point_returns_it() {
        let mut lab = VirtualLab::new(LabConfig::default());
        let grid = CwGrid { mw_powers_dbm: vec![-14.0], laser_powers: vec![1e-3], ..Default::default() };
        let p = ProtocolParams { repeats: Some(2), ..Default::default() };
        let r = optimize_cw(&mut lab, &grid, &p, &NoHooks).unwrap();
        assert_eq!((r.mw_power_dbm, r.laser_power), (-14.0, 1e-3));
    }

    #[test]
    fn optimize_flat_spectra_is_no_signal() {
        let mut cfg = LabConfig::default();
        cfg.mw.rabi_at_ref_hz = 0.0;
        let mut lab = VirtualLab::new(cfg);
        let grid = CwGrid { mw_powers_dbm: vec![-14.0], laser_powers: vec![1e-3], ..Default::default() };
        let p = ProtocolParams { repeats: Some(2), ..Default::default() };
        assert_eq!(optimize_cw(&mut lab, &grid, &p, &NoHooks).unwrap_err(), ProtocolError::NoSignal);
    }

    #[test]
    fn optimize_zero_tol_picks_narrowest() {
        let mut lab = VirtualLab::new(LabConfig::default());
        let grid = CwGrid { mw_powers_dbm: vec![-20.0, -10.0, 0.0], laser_powers: vec![1e-3], tol: 0.0, ..Default::default() };
        let p = ProtocolParams { repeats: Some(5), ..Default::default() };
        let r = optimize_cw(&mut lab, &grid, &p, &NoHooks).unwrap();
        let narrowest = r.points.iter().min_by(|a, b| a.fwhm_hz.total_cmp(&b.fwhm_hz)).unwrap();
        assert_eq!(r.mw_power_dbm, narrowest.mw_power_dbm);
    }
}
