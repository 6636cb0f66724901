//! Pulse-sequence compiler.
//!
//! A [`SequenceSpec`] describes one of the canonical sequences declaratively;
//! [`compile`] turns it into a channel-resolved [`PulseProgram`] on a 1 ns grid
//! together with the readout windows and sync edges the acquisition engine
//! needs. [`validate`] re-derives every invariant from the expanded timeline.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use thiserror::Error;

use crate::instruments::pulser::{HardwareConstraints, Instruction, PulseProgram, Section, CH_LASER, CH_MW, CH_SYNC};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeqError {
    #[error("invalid sequence spec: {0}")]
    Spec(String),
    #[error("constraint violation: {}", .0.join("; "))]
    Constraint(Vec<String>),
    #[error("constant period impossible: blocks need {needed_ns} ns but the period budget is {budget_ns} ns")]
    ConstantPeriod { needed_ns: u64, budget_ns: u64 },
    #[error("constant period is undefined for {0:?} sequences, whose dark delay is the swept parameter")]
    ConstantPeriodKind(SequenceKind),
    #[error("sequence text line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    T1,
    T1Alternating,
    Rabi,
    Ramsey,
    HahnEcho,
    PiCalibration,
    Xy8,
    Custom,
}

impl SequenceKind {
    pub const ALL: [SequenceKind; 8] = [
        SequenceKind::T1,
        SequenceKind::T1Alternating,
        SequenceKind::Rabi,
        SequenceKind::Ramsey,
        SequenceKind::HahnEcho,
        SequenceKind::PiCalibration,
        SequenceKind::Xy8,
        SequenceKind::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SequenceKind::T1 => "t1",
            SequenceKind::T1Alternating => "t1_alternating",
            SequenceKind::Rabi => "rabi",
            SequenceKind::Ramsey => "ramsey",
            SequenceKind::HahnEcho => "hahn_echo",
            SequenceKind::PiCalibration => "pi_calibration",
            SequenceKind::Xy8 => "xy8",
            SequenceKind::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    S0,
    S1,
}

impl Variant {
    pub fn index(self) -> usize {
        self as usize
    }
    pub fn name(self) -> &'static str {
        match self {
            Variant::S0 => "s0",
            Variant::S1 => "s1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Each parameter repeated N times before moving on.
    Np,
    /// All parameters swept once per repetition.
    Pn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncMethod {
    /// Two sync edges per series, continuous recording.
    Method1,
    /// One sync edge per readout pulse, gated recording.
    Method2,
}

/// Fixed timings of a sequence (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedTimings {
    pub laser_pulse_len: f64,
    /// Dark wait after each laser pulse, letting the singlet shelf empty.
    pub init_wait: f64,
    pub pi_len: Option<f64>,
    pub pi_half_len: Option<f64>,
    /// Declared readout window length from the laser rising edge.
    pub readout_len: Option<f64>,
    /// Wait between the last MW pulse and the readout laser.
    pub mw_to_readout: f64,
    /// Fixed echo delay of the pi calibration scan.
    pub tau_fixed: f64,
    pub inter_series_idle: f64,
    pub sync_width: f64,
}

impl Default for FixedTimings {
    fn default() -> Self {
        Self {
            laser_pulse_len: 3e-6,
            init_wait: 1e-6,
            pi_len: None,
            pi_half_len: None,
            readout_len: None,
            mw_to_readout: 100e-9,
            tau_fixed: 1e-6,
            inter_series_idle: 10e-6,
            sync_width: 10e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceOptions {
    pub constant_period: bool,
    /// Optional upper bound (s) on the laser-to-laser period under `constant_period`.
    pub period_budget: Option<f64>,
    pub alternate_final_3pi2: bool,
    pub xy8_order: u32,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        Self { constant_period: false, period_budget: None, alternate_final_3pi2: false, xy8_order: 1 }
    }
}

/// One segment of a custom sequence; its length is `duration + tau_scale * tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CustomSegment {
    pub mw: bool,
    pub phase: f64,
    pub duration: f64,
    pub tau_scale: f64,
}

impl Default for CustomSegment {
    fn default() -> Self {
        Self { mw: false, phase: 0.0, duration: 0.0, tau_scale: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub kind: SequenceKind,
    /// Swept parameter per point (s): tau, or the MW pulse length for rabi and pi_calibration.
    pub sweep: Vec<f64>,
    #[serde(default)]
    pub fixed: FixedTimings,
    #[serde(default)]
    pub options: SequenceOptions,
    #[serde(default)]
    pub custom: Vec<CustomSegment>,
    /// Whether the custom sequence alternates an S1 variant with the MW channel muted.
    #[serde(default)]
    pub custom_alternate: bool,
}

/// Snap seconds onto the 1 ns grid, rounding ties toward the earlier tick.
pub fn snap_ns(t: f64) -> u64 {
    let x = t * 1e9;
    (x - 0.5).ceil().max(0.0) as u64
}

/// Build a canonical spec, checking that the parameters the kind needs are present.
pub fn build(kind: SequenceKind, sweep: Vec<f64>, fixed: FixedTimings, options: SequenceOptions) -> Result<SequenceSpec, SeqError> {
    let spec = SequenceSpec { kind, sweep, fixed, options, custom: Vec::new(), custom_alternate: false };
    spec.check()?;
    Ok(spec)
}

impl SequenceSpec {
    pub fn new(kind: SequenceKind, sweep: Vec<f64>) -> Self {
        Self {
            kind,
            sweep,
            fixed: FixedTimings::default(),
            options: SequenceOptions::default(),
            custom: Vec::new(),
            custom_alternate: false,
        }
    }

    pub fn with_pi(mut self, pi: f64) -> Self {
        self.fixed.pi_len = Some(pi);
        self.fixed.pi_half_len = Some(pi / 2.0);
        self
    }

    pub fn check(&self) -> Result<(), SeqError> {
        if self.sweep.is_empty() {
            return Err(SeqError::Spec("sweep needs at least one value".into()));
        }
        if self.sweep.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SeqError::Spec("sweep values must be finite and non-negative".into()));
        }
        if self.sweep.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SeqError::Spec("sweep values must be strictly increasing".into()));
        }
        let f = &self.fixed;
        if !(f.laser_pulse_len > 0.0) || f.init_wait < 0.0 || f.mw_to_readout < 0.0 || f.inter_series_idle < 0.0 {
            return Err(SeqError::Spec("fixed timings must be non-negative and the laser pulse positive".into()));
        }
        if !(f.sync_width > 0.0) || f.sync_width > f.laser_pulse_len {
            return Err(SeqError::Spec("sync width must be positive and fit in a laser pulse".into()));
        }
        if let Some(r) = f.readout_len {
            if !(r > 0.0) || r > f.laser_pulse_len {
                return Err(SeqError::Spec("readout length must lie within the laser pulse".into()));
            }
        }
        let needs_pi = matches!(self.kind, SequenceKind::T1Alternating | SequenceKind::HahnEcho | SequenceKind::Xy8);
        if needs_pi && f.pi_len.is_none() {
            return Err(SeqError::Spec(format!("{} needs the pi pulse length", self.kind.name())));
        }
        let needs_half = matches!(self.kind, SequenceKind::Ramsey | SequenceKind::HahnEcho | SequenceKind::Xy8);
        if needs_half && f.pi_half_len.is_none() {
            return Err(SeqError::Spec(format!("{} needs the pi/2 pulse length", self.kind.name())));
        }
        if self.kind == SequenceKind::Xy8 && self.options.xy8_order == 0 {
            return Err(SeqError::Spec("xy8 order must be at least 1".into()));
        }
        if self.kind == SequenceKind::Custom && self.custom.is_empty() {
            return Err(SeqError::Spec("custom sequence needs segments".into()));
        }
        Ok(())
    }

    /// Variants per parameter point.
    pub fn variants(&self) -> Vec<Variant> {
        let alt = match self.kind {
            SequenceKind::T1Alternating | SequenceKind::PiCalibration => true,
            SequenceKind::Ramsey | SequenceKind::HahnEcho | SequenceKind::Xy8 => self.options.alternate_final_3pi2,
            SequenceKind::Custom => self.custom_alternate,
            SequenceKind::T1 | SequenceKind::Rabi => false,
        };
        if alt {
            vec![Variant::S0, Variant::S1]
        } else {
            vec![Variant::S0]
        }
    }

    /// Dark and MW segments `(mw_on, ns, phase)` between two laser pulses, excluding waits.
    fn mw_part(&self, p: usize, v: Variant) -> Vec<(bool, u64, f64)> {
        let tau = self.sweep[p];
        let t = snap_ns(tau);
        let f = &self.fixed;
        let pi = f.pi_len.map(snap_ns).unwrap_or(0);
        let half = f.pi_half_len.map(snap_ns).unwrap_or(0);
        let last_half = if v == Variant::S1 { 3 * half } else { half };
        let split = |total: u64| {
            let a = snap_ns(total as f64 * 0.5e-9);
            (a, total - a)
        };
        match self.kind {
            SequenceKind::T1 => vec![(false, t, 0.0)],
            SequenceKind::T1Alternating => vec![(false, t, 0.0), (v == Variant::S1, pi, 0.0)],
            SequenceKind::Rabi => vec![(true, t, 0.0)],
            SequenceKind::Ramsey => vec![(true, half, 0.0), (false, t, 0.0), (true, last_half, 0.0)],
            SequenceKind::HahnEcho => {
                let (a, b) = split(t);
                vec![(true, half, 0.0), (false, a, 0.0), (true, pi, 0.0), (false, b, 0.0), (true, last_half, 0.0)]
            }
            SequenceKind::PiCalibration => {
                let tp_half = snap_ns(tau / 2.0);
                let tp = 2 * tp_half;
                let (a, b) = split(snap_ns(f.tau_fixed));
                let last = if v == Variant::S1 { 3 * tp_half } else { tp_half };
                vec![(true, tp_half, 0.0), (false, a, 0.0), (true, tp, 0.0), (false, b, 0.0), (true, last, 0.0)]
            }
            SequenceKind::Xy8 => {
                const PATTERN: [f64; 8] = [0.0, 0.5, 0.0, 0.5, 0.5, 0.0, 0.5, 0.0];
                let (a, b) = split(t);
                let n = 8 * self.options.xy8_order as usize;
                let mut out = vec![(true, half, 0.0), (false, a, 0.0)];
                for k in 0..n {
                    out.push((true, pi, PATTERN[k % 8] * PI));
                    out.push((false, if k + 1 == n { b } else { t }, 0.0));
                }
                out.push((true, last_half, 0.0));
                out
            }
            SequenceKind::Custom => self
                .custom
                .iter()
                .map(|s| (s.mw && !(v == Variant::S1), snap_ns(s.duration + s.tau_scale * tau), s.phase))
                .collect(),
        }
    }

    fn mw_part_len(&self, p: usize) -> u64 {
        self.variants().iter().map(|&v| self.mw_part(p, v).iter().map(|s| s.1).sum::<u64>()).max().unwrap_or(0)
    }
}

/// Readout window relative to the start of its section iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowTemplate {
    pub offset_ns: u64,
    pub len_ns: u64,
    pub param: usize,
    pub variant: Variant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadoutWindow {
    pub start_ns: u64,
    pub stop_ns: u64,
    pub param: usize,
    pub variant: Variant,
    pub repetition: u32,
    /// Index of the series (a stretch bounded by method-1 sync edges) it belongs to.
    pub series: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledSequence {
    pub kind: SequenceKind,
    pub program: PulseProgram,
    /// Window templates for each program section.
    pub section_windows: Vec<Vec<WindowTemplate>>,
    /// Sections that open a new series.
    pub series_starts: Vec<usize>,
    pub params: Vec<f64>,
    pub variants: Vec<Variant>,
    pub averaging: Averaging,
    pub sync_method: SyncMethod,
    pub repeats: u32,
}

impl CompiledSequence {
    pub fn total_duration(&self) -> f64 {
        self.program.duration_ns() as f64 * 1e-9
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn series_count(&self) -> usize {
        match self.averaging {
            Averaging::Pn => self.repeats as usize,
            Averaging::Np => self.params.len(),
        }
    }

    /// All readout windows in time order.
    pub fn readout_windows(&self) -> impl Iterator<Item = ReadoutWindow> + '_ {
        let mut t0 = 0u64;
        let mut series = 0usize;
        let mut started = false;
        let mut out = Vec::new();
        for (si, sec) in self.program.sections.iter().enumerate() {
            let len = sec.duration_ns();
            for r in 0..sec.repeat {
                if self.series_starts.contains(&si) && (r == 0 || self.averaging == Averaging::Pn) {
                    if started {
                        series += 1;
                    }
                    started = true;
                }
                for w in &self.section_windows[si] {
                    out.push(ReadoutWindow {
                        start_ns: t0 + w.offset_ns,
                        stop_ns: t0 + w.offset_ns + w.len_ns,
                        param: w.param,
                        variant: w.variant,
                        repetition: r,
                        series,
                    });
                }
                t0 += len;
            }
        }
        out.into_iter()
    }

    pub fn window_count(&self) -> usize {
        self.program
            .sections
            .iter()
            .zip(&self.section_windows)
            .map(|(s, w)| s.repeat as usize * w.len())
            .sum::<usize>()
            * self.program.repetitions as usize
    }

    /// Rising edges (ns) of the sync channel.
    pub fn sync_edges(&self) -> Vec<u64> {
        self.program.edges(CH_SYNC).iter().map(|e| e.0).collect()
    }

    /// Laser-pulse rising edges (ns).
    pub fn laser_edges(&self) -> Vec<(u64, u64)> {
        self.program.edges(CH_LASER).iter().map(|e| (e.0, e.1)).collect()
    }
}

struct Builder {
    instructions: Vec<Instruction>,
    windows: Vec<WindowTemplate>,
    t: u64,
}

impl Builder {
    fn new() -> Self {
        Self { instructions: Vec::new(), windows: Vec::new(), t: 0 }
    }

    fn push(&mut self, mask: u8, ns: u64, phase: f64) {
        if ns == 0 {
            return;
        }
        let phase = if mask & CH_MW != 0 { phase } else { 0.0 };
        if let Some(last) = self.instructions.last_mut() {
            if last.mask == mask && last.mw_phase == phase {
                last.duration_ns += ns;
                self.t += ns;
                return;
            }
        }
        self.instructions.push(Instruction { mask, duration_ns: ns, mw_phase: phase });
        self.t += ns;
    }

    /// Laser pulse, with an optional sync edge at its start.
    fn laser(&mut self, len: u64, sync: Option<u64>) {
        match sync {
            Some(w) => {
                self.push(CH_LASER | CH_SYNC, w, 0.0);
                self.push(CH_LASER, len - w, 0.0);
            }
            None => self.push(CH_LASER, len, 0.0),
        }
    }

    fn section(self, repeat: u32) -> (Section, Vec<WindowTemplate>) {
        (Section { instructions: self.instructions, repeat }, self.windows)
    }
}

/// Compile a spec into a program under the given hardware constraints.
pub fn compile(
    spec: &SequenceSpec,
    constraints: &HardwareConstraints,
    sync_method: SyncMethod,
    averaging: Averaging,
    repeats: u32,
) -> Result<CompiledSequence, SeqError> {
    spec.check()?;
    if repeats == 0 {
        return Err(SeqError::Spec("repeats must be at least 1".into()));
    }
    let f = &spec.fixed;
    let laser = snap_ns(f.laser_pulse_len);
    let readout = f.readout_len.map_or(laser, snap_ns);
    let init = snap_ns(f.init_wait);
    let to_readout = snap_ns(f.mw_to_readout);
    let idle = snap_ns(f.inter_series_idle);
    let sync_w = snap_ns(f.sync_width);
    let variants = spec.variants();
    let n_params = spec.sweep.len();

    let max_part = (0..n_params).map(|p| spec.mw_part_len(p)).max().unwrap_or(0);
    if spec.options.constant_period {
        if matches!(spec.kind, SequenceKind::T1 | SequenceKind::T1Alternating) {
            return Err(SeqError::ConstantPeriodKind(spec.kind));
        }
        if let Some(budget) = spec.options.period_budget {
            let needed = init + max_part + to_readout + laser;
            let budget = snap_ns(budget);
            if needed > budget {
                return Err(SeqError::ConstantPeriod { needed_ns: needed, budget_ns: budget });
            }
        }
    }
    let pad_for = |p: usize, v: Variant| -> u64 {
        let budget = match spec.options.period_budget {
            Some(b) => snap_ns(b) - laser - init - to_readout,
            None => max_part,
        };
        if spec.options.constant_period {
            budget - spec.mw_part(p, v).iter().map(|s| s.1).sum::<u64>()
        } else {
            0
        }
    };
    // under constant_period the series boundary keeps the same laser gap
    let idle = if spec.options.constant_period { init + pad_for(0, variants[0]) + spec.mw_part(0, variants[0]).iter().map(|s| s.1).sum::<u64>() + to_readout } else { idle };
    let method2 = sync_method == SyncMethod::Method2;
    let block = |b: &mut Builder, p: usize, v: Variant| {
        b.push(0, init + pad_for(p, v), 0.0);
        for (mw, ns, phase) in spec.mw_part(p, v) {
            b.push(if mw { CH_MW } else { 0 }, ns, phase);
        }
        b.push(0, to_readout, 0.0);
        b.windows.push(WindowTemplate { offset_ns: b.t, len_ns: readout, param: p, variant: v });
        b.laser(laser, method2.then_some(sync_w));
    };
    let pol = |b: &mut Builder| b.laser(laser, (!method2).then_some(sync_w));
    let end = |b: &mut Builder| {
        if method2 {
            b.push(0, idle, 0.0);
        } else {
            b.push(CH_SYNC, sync_w, 0.0);
            b.push(0, idle.saturating_sub(sync_w), 0.0);
        }
    };

    let mut sections = Vec::new();
    let mut section_windows = Vec::new();
    let mut series_starts = Vec::new();
    match averaging {
        Averaging::Pn => {
            let mut b = Builder::new();
            pol(&mut b);
            for p in 0..n_params {
                for &v in &variants {
                    block(&mut b, p, v);
                }
            }
            end(&mut b);
            let (s, w) = b.section(repeats);
            series_starts.push(0);
            sections.push(s);
            section_windows.push(w);
        }
        Averaging::Np => {
            for p in 0..n_params {
                let mut b = Builder::new();
                pol(&mut b);
                series_starts.push(sections.len());
                let (s, w) = b.section(1);
                sections.push(s);
                section_windows.push(w);
                let mut b = Builder::new();
                for &v in &variants {
                    block(&mut b, p, v);
                }
                let (s, w) = b.section(repeats);
                sections.push(s);
                section_windows.push(w);
                let mut b = Builder::new();
                end(&mut b);
                let (s, w) = b.section(1);
                sections.push(s);
                section_windows.push(w);
            }
        }
    }
    let program = PulseProgram { channels: PulseProgram::default_channels(), sections, repetitions: 1 };
    let mut offending = Vec::new();
    for (si, s) in program.sections.iter().enumerate() {
        for (ii, ins) in s.instructions.iter().enumerate() {
            if ins.duration_ns < constraints.min_pulse_width_ns {
                offending.push(format!(
                    "section {si} instruction {ii} ({}) lasts {} ns < {} ns",
                    mask_names(ins.mask),
                    ins.duration_ns,
                    constraints.min_pulse_width_ns
                ));
            }
        }
    }
    if program.instruction_count() > constraints.max_instructions {
        offending.push(format!("{} instructions exceed the limit of {}", program.instruction_count(), constraints.max_instructions));
    }
    if !offending.is_empty() {
        return Err(SeqError::Constraint(offending));
    }
    Ok(CompiledSequence {
        kind: spec.kind,
        program,
        section_windows,
        series_starts,
        params: spec.sweep.clone(),
        variants,
        averaging,
        sync_method,
        repeats,
    })
}

fn mask_names(mask: u8) -> String {
    let mut v = Vec::new();
    if mask & CH_LASER != 0 {
        v.push("laser");
    }
    if mask & CH_MW != 0 {
        v.push("mw");
    }
    if mask & CH_SYNC != 0 {
        v.push("sync");
    }
    if v.is_empty() {
        "idle".into()
    } else {
        v.join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Finding {
    Width { at_ns: u64, duration_ns: u64, min_ns: u64 },
    Capacity { count: usize, max: usize },
    Collision { at_ns: u64 },
    WindowOverlap { first_start_ns: u64, second_start_ns: u64 },
    WindowOutsideLaser { start_ns: u64 },
    SyncCount { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Independently re-check a compiled sequence.
pub fn validate(seq: &CompiledSequence, constraints: &HardwareConstraints) -> ValidationReport {
    let mut findings = Vec::new();
    let count = seq.program.instruction_count();
    if count > constraints.max_instructions {
        findings.push(Finding::Capacity { count, max: constraints.max_instructions });
    }
    let mut laser: Vec<(u64, u64)> = Vec::new();
    let mut seen_width = std::collections::HashSet::new();
    for (t, ins) in seq.program.timeline() {
        if ins.duration_ns < constraints.min_pulse_width_ns && seen_width.insert(ins.duration_ns) {
            findings.push(Finding::Width { at_ns: t, duration_ns: ins.duration_ns, min_ns: constraints.min_pulse_width_ns });
        }
        if ins.mask & CH_LASER != 0 && ins.mask & CH_MW != 0 {
            findings.push(Finding::Collision { at_ns: t });
        }
        if ins.mask & CH_LASER != 0 {
            match laser.last_mut() {
                Some(l) if l.1 == t => l.1 = t + ins.duration_ns,
                _ => laser.push((t, t + ins.duration_ns)),
            }
        }
    }
    let windows: Vec<ReadoutWindow> = seq.readout_windows().collect();
    for w in windows.windows(2) {
        if w[1].start_ns < w[0].stop_ns {
            findings.push(Finding::WindowOverlap { first_start_ns: w[0].start_ns, second_start_ns: w[1].start_ns });
        }
    }
    let mut li = 0;
    for w in &windows {
        while li < laser.len() && laser[li].1 <= w.start_ns {
            li += 1;
        }
        if li >= laser.len() || laser[li].0 > w.start_ns || laser[li].1 < w.stop_ns {
            findings.push(Finding::WindowOutsideLaser { start_ns: w.start_ns });
        }
    }
    let found = seq.sync_edges().len();
    let expected = match seq.sync_method {
        SyncMethod::Method1 => 2 * seq.series_count(),
        SyncMethod::Method2 => windows.len(),
    };
    if found != expected {
        findings.push(Finding::SyncCount { expected, found });
    }
    ValidationReport { findings }
}

fn averaging_name(a: Averaging) -> &'static str {
    match a {
        Averaging::Np => "np",
        Averaging::Pn => "pn",
    }
}

fn sync_name(s: SyncMethod) -> &'static str {
    match s {
        SyncMethod::Method1 => "method1",
        SyncMethod::Method2 => "method2",
    }
}

/// Edge list of a rendered sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSequence {
    pub kind: SequenceKind,
    pub params: usize,
    pub repeats: u32,
    pub sync_method: SyncMethod,
    pub averaging: Averaging,
    /// `(channel, start_ns, stop_ns, phase)`.
    pub edges: Vec<(String, u64, u64, Option<f64>)>,
}

/// Render to the line-oriented timing format.
pub fn render(seq: &CompiledSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# kind={} P={} N={} sync={} averaging={}", seq.kind.name(), seq.params.len(), seq.repeats, sync_name(seq.sync_method), averaging_name(seq.averaging));
    for (name, mask) in [("laser", CH_LASER), ("mw_switch", CH_MW), ("sync", CH_SYNC)] {
        for (a, b, phase) in seq.program.edges(mask) {
            if mask == CH_MW {
                let _ = writeln!(out, "{name} {a} {b} phase={phase:?}");
            } else {
                let _ = writeln!(out, "{name} {a} {b}");
            }
        }
    }
    out
}

fn parse_err(line: usize, message: impl Into<String>) -> SeqError {
    SeqError::Parse { line, message: message.into() }
}

/// Parse the timing format produced by [`render`].
pub fn parse_rendered(text: &str) -> Result<RenderedSequence, SeqError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let header = header.strip_prefix('#').ok_or_else(|| parse_err(1, "missing header"))?;
    let (mut kind, mut params, mut repeats, mut sync, mut avg) = (None, None, None, None, None);
    for kv in header.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| parse_err(1, format!("bad header field {kv}")))?;
        match k {
            "kind" => kind = SequenceKind::parse(v),
            "P" => params = v.parse().ok(),
            "N" => repeats = v.parse().ok(),
            "sync" => {
                sync = match v {
                    "method1" => Some(SyncMethod::Method1),
                    "method2" => Some(SyncMethod::Method2),
                    _ => None,
                }
            }
            "averaging" => {
                avg = match v {
                    "np" => Some(Averaging::Np),
                    "pn" => Some(Averaging::Pn),
                    _ => None,
                }
            }
            _ => return Err(parse_err(1, format!("unknown header field {k}"))),
        }
    }
    let missing = |what: &str| parse_err(1, format!("header lacks a valid {what}"));
    let mut edges = Vec::new();
    for (i, line) in lines {
        let mut it = line.split_whitespace();
        let channel = it.next().unwrap_or_default();
        if !["laser", "mw_switch", "sync"].contains(&channel) {
            return Err(parse_err(i + 1, format!("unknown channel {channel}")));
        }
        let num = |s: Option<&str>| -> Result<u64, SeqError> {
            s.and_then(|s| s.parse().ok()).ok_or_else(|| parse_err(i + 1, "expected integer ns"))
        };
        let a = num(it.next())?;
        let b = num(it.next())?;
        if b <= a {
            return Err(parse_err(i + 1, "edge stops before it starts"));
        }
        let phase = match it.next() {
            Some(p) => Some(
                p.strip_prefix("phase=")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| parse_err(i + 1, "bad phase attribute"))?,
            ),
            None => None,
        };
        if it.next().is_some() {
            return Err(parse_err(i + 1, "trailing fields"));
        }
        edges.push((channel.to_string(), a, b, phase));
    }
    Ok(RenderedSequence {
        kind: kind.ok_or_else(|| missing("kind"))?,
        params: params.ok_or_else(|| missing("P"))?,
        repeats: repeats.ok_or_else(|| missing("N"))?,
        sync_method: sync.ok_or_else(|| missing("sync"))?,
        averaging: avg.ok_or_else(|| missing("averaging"))?,
        edges,
    })
}

/// Edge list of a compiled sequence in the same shape as [`parse_rendered`] yields.
pub fn edge_list(seq: &CompiledSequence) -> Vec<(String, u64, u64, Option<f64>)> {
    let mut out = Vec::new();
    for (name, mask) in [("laser", CH_LASER), ("mw_switch", CH_MW), ("sync", CH_SYNC)] {
        for (a, b, phase) in seq.program.edges(mask) {
            out.push((name.to_string(), a, b, (mask == CH_MW).then_some(phase)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw() -> HardwareConstraints {
        HardwareConstraints::default()
    }

    fn taus(p: usize) -> Vec<f64> {
        (1..=p).map(|k| k as f64 * 200e-9).collect()
    }

    #[test]
    fn snapping_ties_go_earlier() {
        assert_eq!(snap_ns(100e-9), 100);
        assert_eq!(snap_ns(2.5e-9), 2);
        assert_eq!(snap_ns(2.6e-9), 3);
        assert_eq!(snap_ns(3.5e-9), 3);
    }

    #[test]
    fn ramsey_pn_counts_laser_pulses() {
        let spec = SequenceSpec::new(SequenceKind::Ramsey, taus(5)).with_pi(100e-9);
        let seq = compile(&spec, &hw(), SyncMethod::Method1, Averaging::Pn, 1).unwrap();
        assert_eq!(seq.laser_edges().len(), 6);
        assert_eq!(seq.program.edges(CH_MW).len(), 10);
    }

    #[test]
    fn t1_has_no_mw() {
        let seq = compile(&SequenceSpec::new(SequenceKind::T1, taus(4)), &hw(), SyncMethod::Method2, Averaging::Np, 3).unwrap();
        assert!(seq.program.edges(CH_MW).is_empty());
    }

    #[test]
    fn pi_calibration_final_pulse_alternates() {
        let spec = SequenceSpec::new(SequenceKind::PiCalibration, vec![100e-9]);
        let seq = compile(&spec, &hw(), SyncMethod::Method2, Averaging::Pn, 2).unwrap();
        let mw = seq.program.edges(CH_MW);
        let lens: Vec<u64> = mw.iter().map(|e| e.1 - e.0).collect();
        assert_eq!(lens, vec![50, 100, 50, 50, 100, 150, 50, 100, 50, 50, 100, 150]);
    }

    #[test]
    fn rabi_np_method2_sync_count() {
        let spec = SequenceSpec::new(SequenceKind::Rabi, vec![20e-9, 40e-9, 60e-9]);
        let seq = compile(&spec, &hw(), SyncMethod::Method2, Averaging::Np, 7).unwrap();
        assert_eq!(seq.sync_edges().len(), 21);
        assert_eq!(seq.window_count(), 21);
        assert!(validate(&seq, &hw()).is_clean());
    }

    #[test]
    fn hahn_pn_method1() {
        let spec = SequenceSpec::new(SequenceKind::HahnEcho, taus(10)).with_pi(100e-9);
        let seq = compile(&spec, &hw(), SyncMethod::Method1, Averaging::Pn, 1).unwrap();
        assert_eq!(seq.sync_edges().len(), 2);
        assert_eq!(seq.laser_edges().len(), 11);
    }

    #[test]
    fn too_short_pulse_is_refused() {
        let spec = SequenceSpec::new(SequenceKind::Rabi, vec![1e-9]);
        assert!(matches!(compile(&spec, &hw(), SyncMethod::Method2, Averaging::Np, 1), Err(SeqError::Constraint(_))));
    }

    #[test]
    fn missing_pi_is_a_spec_error() {
        let spec = SequenceSpec::new(SequenceKind::HahnEcho, taus(3));
        assert!(matches!(spec.check(), Err(SeqError::Spec(_))));
    }

    #[test]
    fn constant_period_gaps() {
        let mut spec = SequenceSpec::new(SequenceKind::Rabi, vec![10e-9, 50e-9, 333e-9]);
        spec.options.constant_period = true;
        let seq = compile(&spec, &hw(), SyncMethod::Method2, Averaging::Pn, 1).unwrap();
        let l = seq.laser_edges();
        let gaps: Vec<u64> = l.windows(2).map(|w| w[1].0 - w[0].1).collect();
        assert!(gaps.iter().all(|&g| g == gaps[0]), "{gaps:?}");
        spec.options.period_budget = Some(3.5e-6);
        assert!(matches!(compile(&spec, &hw(), SyncMethod::Method2, Averaging::Pn, 1), Err(SeqError::ConstantPeriod { .. })));
        let t1 = SequenceSpec { options: spec.options, ..SequenceSpec::new(SequenceKind::T1, taus(2)) };
        assert!(matches!(compile(&t1, &hw(), SyncMethod::Method2, Averaging::Pn, 1), Err(SeqError::ConstantPeriodKind(_))));
    }

    #[test]
    fn overlapping_windows_found() {
        let spec = SequenceSpec::new(SequenceKind::Rabi, vec![20e-9, 40e-9]);
        let mut seq = compile(&spec, &hw(), SyncMethod::Method2, Averaging::Pn, 1).unwrap();
        seq.section_windows[0][1].offset_ns = seq.section_windows[0][0].offset_ns + 10;
        let r = validate(&seq, &hw());
        assert!(r.findings.iter().any(|f| matches!(f, Finding::WindowOverlap { .. })));
    }

    #[test]
    fn capacity_found() {
        let spec = SequenceSpec::new(SequenceKind::Rabi, vec![20e-9, 40e-9]);
        let seq = compile(&spec, &hw(), SyncMethod::Method2, Averaging::Pn, 1).unwrap();
        let small = HardwareConstraints { max_instructions: 3, ..hw() };
        assert!(validate(&seq, &small).findings.iter().any(|f| matches!(f, Finding::Capacity { .. })));
    }

    #[test]
    fn render_round_trip() {
        let mut spec = SequenceSpec::new(SequenceKind::Xy8, taus(3)).with_pi(100e-9);
        spec.options.alternate_final_3pi2 = true;
        let seq = compile(&spec, &hw(), SyncMethod::Method1, Averaging::Np, 2).unwrap();
        let parsed = parse_rendered(&render(&seq)).unwrap();
        assert_eq!(parsed.edges, edge_list(&seq));
        assert_eq!(parsed.kind, SequenceKind::Xy8);
        assert_eq!(parsed.repeats, 2);
    }
}
