use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use super::lab::{Dark, PrepCache, Prep, PulseRate, SeriesRate, VirtualLab};
use super::{EngineError, Hooks, Partial, RunConfig};
use crate::dsp::{extract_pulses, integrate_normalize, Trace, WindowPlan};
use crate::instruments::daq::{daq_acquire, DaqError, DaqMode, RawSamples};
use crate::instruments::detector::{Detection, Detector, DetectorKind, RateSource};
use crate::instruments::laser::LaserDriver;
use crate::instruments::pulser::{CH_LASER, CH_MW, CH_SYNC};
use crate::rng::SeedTree;
use crate::sequence::{Averaging, CompiledSequence, SequenceKind, SyncMethod, Variant};

const K_LASER: u64 = 1;
const K_PHOTON: u64 = 2;
const K_DARK: u64 = 3;
const K_ANALOG: u64 = 4;
const K_TAIL: u64 = 5;
const K_SPIN: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulsedRequest {
    pub seq: CompiledSequence,
    pub run: RunConfig,
}

/// Accumulated pulsed measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRun {
    pub kind: SequenceKind,
    pub params: Vec<f64>,
    pub variants: Vec<Variant>,
    pub averaging: Averaging,
    pub sync_method: SyncMethod,
    pub daq_mode: DaqMode,
    /// Histogram bin width (s).
    pub hist_dt: f64,
    pub window_len: f64,
    /// Summed readout histograms, `[variant][param][bin]`.
    pub histograms: Vec<Vec<Vec<f64>>>,
    /// Windows accumulated into each histogram, `[variant][param]`.
    pub window_counts: Vec<Vec<u64>>,
    pub windows_expected: usize,
    pub windows_mapped: usize,
    pub sync_edges: usize,
    /// Method-1 continuous series accumulators.
    pub series_traces: Vec<Trace>,
    pub recorded_total: f64,
    pub discarded_total: f64,
    pub last_samples: Option<RawSamples>,
    pub snr_history: Vec<f64>,
    pub log: Vec<String>,
    pub partial: bool,
    /// Simulated duration (s).
    pub duration: f64,
}

impl RawRun {
    /// Mean readout trace of one parameter and variant.
    pub fn trace(&self, variant: usize, param: usize) -> Trace {
        let n = self.window_counts[variant][param].max(1) as f64;
        Trace::new(self.hist_dt, self.histograms[variant][param].iter().map(|c| c / n).collect())
    }

    /// Normalized readout signal, `[variant][param]`.
    pub fn signals(&self, plan: &WindowPlan) -> Result<Vec<Vec<f64>>, EngineError> {
        let mut out = Vec::new();
        for v in 0..self.variants.len() {
            let mut row = Vec::new();
            for p in 0..self.params.len() {
                let tr = self.trace(v, p);
                row.push(integrate_normalize(&tr, &[(0.0, tr.duration())], plan)?[0]);
            }
            out.push(row);
        }
        Ok(out)
    }

    /// Mean integral of one readout window, `[variant][param]`.
    pub fn window_integrals(&self) -> Vec<Vec<f64>> {
        (0..self.variants.len())
            .map(|v| {
                (0..self.params.len())
                    .map(|p| self.histograms[v][p].iter().sum::<f64>() / self.window_counts[v][p].max(1) as f64)
                    .collect()
            })
            .collect()
    }

    /// Integrated signal-window counts of each readout, `[variant][param]`.
    pub fn signal_window_sums(&self, plan: &WindowPlan) -> Vec<Vec<f64>> {
        (0..self.variants.len())
            .map(|v| (0..self.params.len()).map(|p| self.trace(v, p).integral(plan.signal.0, plan.signal.1)).collect())
            .collect()
    }
}

/// Nonzero histogram entries of one readout as `(bin, value)`.
fn sparse_bins(samples: &RawSamples, nb: usize, hist_dt: f64, out: &mut Vec<(usize, f64)>) {
    out.clear();
    match samples {
        RawSamples::TimeTags { resolution, tags } => {
            for &t in tags {
                let b = (t as f64 * resolution / hist_dt + 1e-9).floor() as usize;
                if b < nb {
                    out.push((b, 1.0));
                }
            }
        }
        RawSamples::Binned { counts, .. } => out.extend(counts.iter().take(nb).enumerate().filter(|c| *c.1 != 0).map(|(k, c)| (k, *c as f64))),
        RawSamples::Analog { values, .. } => out.extend(values.iter().take(nb).copied().enumerate()),
        RawSamples::Expected { counts, .. } => out.extend(counts.iter().take(nb).copied().enumerate()),
    }
}

/// Fraction of each histogram bin inside `[a, b)`.
fn bin_weights(nb: usize, dt: f64, (a, b): (f64, f64)) -> Vec<f64> {
    (0..nb)
        .map(|k| {
            let lo = (k as f64 * dt).max(a);
            let hi = ((k + 1) as f64 * dt).min(b);
            (hi - lo).max(0.0) / dt
        })
        .collect()
}

fn to_bins(samples: &RawSamples, out: &mut [f64], hist_dt: f64) {
    let n = out.len();
    match samples {
        RawSamples::TimeTags { resolution, tags } => {
            for &t in tags {
                let b = (t as f64 * resolution / hist_dt + 1e-9).floor() as usize;
                if b < n {
                    out[b] += 1.0;
                }
            }
        }
        RawSamples::Binned { counts, .. } => out.iter_mut().zip(counts).for_each(|(o, c)| *o += *c as f64),
        RawSamples::Analog { values, .. } => out.iter_mut().zip(values).for_each(|(o, c)| *o += c),
        RawSamples::Expected { counts, .. } => out.iter_mut().zip(counts).for_each(|(o, c)| *o += c),
    }
}

/// Running signal and reference sums for live SNR.
struct Running {
    sig: Vec<Vec<f64>>,
    refs: Vec<Vec<f64>>,
    seen: Vec<Vec<bool>>,
    plan: WindowPlan,
    w_sig: Vec<f64>,
    w_ref: Vec<f64>,
    poisson: bool,
}

impl Running {
    fn add(&mut self, v: usize, p: usize, entries: &[(usize, f64)]) {
        for &(k, x) in entries {
            self.sig[v][p] += x * self.w_sig[k];
            self.refs[v][p] += x * self.w_ref[k];
        }
        self.seen[v][p] = true;
    }

    fn ratio(&self, v: usize, p: usize) -> f64 {
        let ls = self.plan.signal.1 - self.plan.signal.0;
        let lr = self.plan.reference.1 - self.plan.reference.0;
        if self.refs[v][p] == 0.0 {
            0.0
        } else {
            (self.sig[v][p] / ls) / (self.refs[v][p] / lr)
        }
    }

    fn snr(&self) -> Option<f64> {
        if !self.poisson {
            return None;
        }
        let idx: Vec<usize> = (0..self.sig[0].len()).filter(|&p| self.seen[0][p]).collect();
        if idx.len() < 2 {
            return None;
        }
        let s: Vec<f64> = idx.iter().map(|&p| self.ratio(0, p)).collect();
        let range = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - s.iter().cloned().fold(f64::INFINITY, f64::min);
        let sigma = idx
            .iter()
            .zip(&s)
            .map(|(&p, r)| {
                let (a, b) = (self.sig[0][p], self.refs[0][p]);
                if a > 0.0 && b > 0.0 {
                    r * (1.0 / a + 1.0 / b).sqrt()
                } else {
                    f64::INFINITY
                }
            })
            .sum::<f64>()
            / idx.len() as f64;
        (sigma > 0.0 && sigma.is_finite()).then(|| range / sigma)
    }

    fn partial(&self, params: &[f64], repetition: u32, snr: Option<f64>) -> Partial {
        let idx: Vec<usize> = (0..params.len()).filter(|&p| self.seen[0][p]).collect();
        let alt = if self.sig.len() > 1 { idx.iter().map(|&p| self.ratio(1, p)).collect() } else { Vec::new() };
        Partial::Pulsed {
            params: idx.iter().map(|&p| params[p]).collect(),
            signal: idx.iter().map(|&p| self.ratio(0, p)).collect(),
            alternate: alt,
            snr,
            repetition,
        }
    }
}

struct SeriesState {
    start_ns: u64,
    slot: usize,
    pulses: Vec<(f64, PulseRate, u64)>,
    windows: Vec<(f64, usize, usize)>,
}

struct Walker<'a> {
    lab: &'a VirtualLab,
    run: &'a RunConfig,
    seq: &'a CompiledSequence,
    tree: SeedTree,
    cache: PrepCache<'a>,
    driver: LaserDriver,
    detector: Detector,
    hist_dt: f64,
    nb: usize,
    analog_dt: f64,
    bright: f64,
    tau: f64,
    noiseless: bool,
    out: RawRun,
    running: Running,
    pending: VecDeque<(u64, usize, usize)>,
    prep: Prep,
    after_laser: bool,
    laser_start: Option<u64>,
    laser_sync: bool,
    prev_sync: bool,
    last_laser_end: Option<u64>,
    pulse_index: u64,
    series: Option<SeriesState>,
    series_count: u64,
    slot_acc: Vec<Vec<f64>>,
    slot_windows: Vec<Vec<(f64, usize, usize)>>,
    slot_series: Vec<u64>,
    scratch: Vec<(usize, f64)>,
    overflow: bool,
}

impl<'a> Walker<'a> {
    fn detect(&mut self, src: &dyn RateSource, abs: f64, key: u64) -> Result<Detection, EngineError> {
        Ok(match self.detector.config.kind {
            DetectorKind::AnalogPd => {
                let mut rng = self.tree.stream(&[K_ANALOG, key]);
                Detection::Analog(self.detector.analog(src, self.analog_dt, &mut rng)?)
            }
            DetectorKind::DigitalPc if self.noiseless => {
                Detection::Expected { dt: self.hist_dt, counts: self.detector.expected(src, self.hist_dt) }
            }
            DetectorKind::DigitalPc => {
                let mut rng = self.tree.stream(&[K_PHOTON, key]);
                Detection::Photons(self.detector.photons(src, abs, &mut rng))
            }
        })
    }

    fn acquire(&mut self, det: &Detection) -> Result<Option<RawSamples>, EngineError> {
        match daq_acquire(det, self.run.daq_mode, &self.lab.cfg.daq) {
            Ok(s) => Ok(Some(s)),
            Err(DaqError::Overrun { index }) => {
                self.out.log.push(format!("daq overflow at sample {index}; run aborted"));
                self.overflow = true;
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn finish_pulse(&mut self, a: u64, b: u64) -> Result<(), EngineError> {
        let p1 = self.cache.get(&self.prep, self.after_laser);
        self.prep.clear();
        self.after_laser = true;
        let start = a as f64 * 1e-9;
        let dur = (b - a) as f64 * 1e-9;
        let pulse = self.driver.emit(self.lab.clock + start, dur, f64::INFINITY);
        let src = PulseRate { pulse, bright: self.bright, contrast: self.lab.cfg.spin.readout_contrast, p1, tau: self.tau };
        let idx = self.pulse_index;
        self.pulse_index += 1;
        while self.pending.front().is_some_and(|w| w.0 < a) {
            let w = self.pending.pop_front().unwrap();
            self.out.log.push(format!("window at {} ns has no laser pulse", w.0));
        }
        let window = if self.pending.front().is_some_and(|w| w.0 == a) { self.pending.pop_front() } else { None };
        let gap = self.last_laser_end.map_or(f64::INFINITY, |e| (a - e) as f64 * 1e-9);
        self.last_laser_end = Some(b);
        match self.seq.sync_method {
            SyncMethod::Method2 => {
                self.detector.advance_dark(gap);
                if let Some((_, p, v)) = window {
                    let det = self.detect(&src, start, idx)?;
                    if let Some(samples) = self.acquire(&det)? {
                        let mut entries = std::mem::take(&mut self.scratch);
                        sparse_bins(&samples, self.nb, self.hist_dt, &mut entries);
                        self.running.add(v, p, &entries);
                        let h = &mut self.out.histograms[v][p];
                        for &(k, x) in &entries {
                            h[k] += x;
                            self.out.recorded_total += x;
                        }
                        self.scratch = entries;
                        self.out.window_counts[v][p] += 1;
                        self.out.windows_mapped += 1;
                        self.out.last_samples = Some(samples);
                    }
                }
            }
            SyncMethod::Method1 => {
                if let Some(s) = self.series.as_mut() {
                    let off = (a - s.start_ns) as f64 * 1e-9;
                    s.pulses.push((off, src, idx));
                    if let Some((_, p, v)) = window {
                        s.windows.push((off, p, v));
                    }
                } else if window.is_some() {
                    self.out.log.push(format!("readout at {a} ns outside a recorded series"));
                }
            }
        }
        Ok(())
    }

    fn finish_series(&mut self, end: u64) -> Result<(), EngineError> {
        let Some(s) = self.series.take() else { return Ok(()) };
        let dur = (end - s.start_ns) as f64 * 1e-9;
        let nbins = (dur / self.hist_dt + 1e-9).floor() as usize;
        if nbins > self.lab.cfg.daq.buffer_capacity {
            self.out.log.push(format!("daq overflow: series needs {nbins} samples"));
            self.overflow = true;
            return Ok(());
        }
        let abs0 = s.start_ns as f64 * 1e-9;
        let key = self.series_count;
        self.series_count += 1;
        let det = match (self.detector.config.kind, self.noiseless) {
            (DetectorKind::DigitalPc, false) => {
                let mut times = Vec::new();
                let mut cursor = 0.0;
                for (off, src, idx) in &s.pulses {
                    if *off > cursor {
                        let mut rng = self.tree.stream(&[K_DARK, *idx]);
                        let ev = self.detector.photons(&Dark(off - cursor), abs0 + cursor, &mut rng);
                        times.extend(ev.times.iter().map(|t| t + cursor));
                    }
                    let mut rng = self.tree.stream(&[K_PHOTON, *idx]);
                    let ev = self.detector.photons(src, abs0 + off, &mut rng);
                    times.extend(ev.times.iter().map(|t| t + off));
                    cursor = off + src.duration();
                }
                if dur > cursor {
                    let mut rng = self.tree.stream(&[K_TAIL, key]);
                    let ev = self.detector.photons(&Dark(dur - cursor), abs0 + cursor, &mut rng);
                    times.extend(ev.times.iter().map(|t| t + cursor));
                }
                Detection::Photons(crate::instruments::detector::PhotonEvents { duration: dur, times })
            }
            _ => {
                let src = SeriesRate { duration: dur, pulses: s.pulses.iter().map(|(o, p, _)| (*o, *p)).collect() };
                self.detect(&src, abs0, key)?
            }
        };
        let Some(samples) = self.acquire(&det)? else { return Ok(()) };
        let mut dense = vec![0.0; nbins];
        to_bins(&samples, &mut dense, self.hist_dt);
        let tr = Trace::new(self.hist_dt, dense);
        let wlen = self.out.window_len;
        for &(off, p, v) in &s.windows {
            let bins: Vec<f64> = (0..self.nb)
                .map(|k| tr.integral(off + k as f64 * self.hist_dt, off + (k + 1) as f64 * self.hist_dt))
                .collect();
            debug_assert!(off + wlen <= tr.duration() + 1e-12);
            let entries: Vec<(usize, f64)> = bins.into_iter().enumerate().collect();
            self.running.add(v, p, &entries);
        }
        if self.slot_acc.len() <= s.slot {
            self.slot_acc.resize(s.slot + 1, Vec::new());
            self.slot_windows.resize(s.slot + 1, Vec::new());
            self.slot_series.resize(s.slot + 1, 0);
        }
        let acc = &mut self.slot_acc[s.slot];
        if acc.is_empty() {
            *acc = tr.values;
            self.slot_windows[s.slot] = s.windows;
        } else {
            acc.iter_mut().zip(&tr.values).for_each(|(a, x)| *a += x);
        }
        self.slot_series[s.slot] += 1;
        self.out.last_samples = Some(samples);
        Ok(())
    }

    fn step(&mut self, mask: u8, phase: f64, t: u64, ns: u64) -> Result<(), EngineError> {
        let laser = mask & CH_LASER != 0;
        let sync = mask & CH_SYNC != 0;
        if sync && !self.prev_sync {
            self.out.sync_edges += 1;
        }
        let method1 = self.seq.sync_method == SyncMethod::Method1;
        if laser {
            if self.laser_start.is_none() {
                self.laser_start = Some(t);
                self.laser_sync = sync;
                if method1 && sync {
                    let slot = match self.seq.averaging {
                        Averaging::Pn => 0,
                        Averaging::Np => self.series_count as usize,
                    };
                    self.series = Some(SeriesState { start_ns: t, slot, pulses: Vec::new(), windows: Vec::new() });
                }
            }
        } else {
            if let Some(a) = self.laser_start.take() {
                self.finish_pulse(a, t)?;
            }
            if method1 && sync && !self.prev_sync {
                self.finish_series(t)?;
            }
            let mw = mask & CH_MW != 0;
            self.prep.push((mw, if mw { phase.to_bits() } else { 0 }, ns));
        }
        self.prev_sync = sync;
        Ok(())
    }

    /// Cut declared or extracted windows out of the method-1 accumulators.
    fn map_series(&mut self) -> Result<(), EngineError> {
        let wlen = self.out.window_len;
        for slot in 0..self.slot_acc.len() {
            let acc = Trace::new(self.hist_dt, std::mem::take(&mut self.slot_acc[slot]));
            let reps = self.slot_series[slot];
            let declared = self.slot_windows[slot].clone();
            let starts: Vec<Option<f64>> = if self.run.blind {
                // Pulses may touch the series boundaries, so extract from a zero-padded copy.
                let pad = ((4.0 * self.run.extraction.sigma + self.run.extraction.min_pulse_gap) / self.hist_dt).ceil() as usize + 1;
                let mut padded = vec![0.0; pad];
                padded.extend_from_slice(&acc.values);
                padded.resize(padded.len() + pad, 0.0);
                let shift = pad as f64 * self.hist_dt;
                let ext = extract_pulses(&Trace::new(self.hist_dt, padded), &self.run.extraction)?;
                self.out.log.extend(ext.warnings.iter().map(|w| format!("series slot {slot}: {w}")));
                declared
                    .iter()
                    .map(|&(off, _, _)| {
                        ext.pulses
                            .iter()
                            .map(|r| r.0 - shift)
                            .filter(|r| (r - off).abs() < wlen / 2.0)
                            .min_by(|a, b| (a - off).abs().total_cmp(&(b - off).abs()))
                    })
                    .collect()
            } else {
                declared.iter().map(|w| Some(w.0)).collect()
            };
            let mut mapped: Vec<(f64, f64)> = Vec::new();
            for (&(off, p, v), st) in declared.iter().zip(&starts) {
                let Some(a) = *st else {
                    self.out.log.push(format!("series slot {slot}: no pulse found near {off:e} s"));
                    continue;
                };
                let a = a.max(0.0);
                for k in 0..self.nb {
                    self.out.histograms[v][p][k] += acc.integral(a + k as f64 * self.hist_dt, a + (k + 1) as f64 * self.hist_dt);
                }
                self.out.window_counts[v][p] += reps;
                self.out.windows_mapped += reps as usize;
                mapped.push((a, a + self.nb as f64 * self.hist_dt));
            }
            mapped.sort_by(|x, y| x.0.total_cmp(&y.0));
            let mut cursor = 0.0;
            let mut discarded = 0.0;
            for (a, b) in &mapped {
                discarded += acc.integral(cursor, *a);
                cursor = cursor.max(*b);
            }
            discarded += acc.integral(cursor, acc.duration());
            self.out.discarded_total += discarded;
            self.out.recorded_total += acc.values.iter().sum::<f64>();
            self.out.series_traces.push(acc);
        }
        Ok(())
    }
}

/// Execute a compiled pulse program against the virtual instrument chain.
pub fn run_pulsed(lab: &mut VirtualLab, req: &PulsedRequest, hooks: &dyn Hooks) -> Result<RawRun, EngineError> {
    let (seq, run) = (&req.seq, &req.run);
    run.validate(&lab.cfg)?;
    if seq.averaging != run.averaging || seq.sync_method != run.sync {
        return Err(EngineError::Config(format!(
            "sequence compiled for {:?}/{:?} but run requests {:?}/{:?}",
            seq.averaging, seq.sync_method, run.averaging, run.sync
        )));
    }
    let daq = &lab.cfg.daq;
    let hist_dt = match run.daq_mode {
        DaqMode::TimeTag => daq.tag_resolution(),
        DaqMode::BinnedCounts => daq.bin_period,
        DaqMode::Analog => daq.analog_period(),
    };
    let readout_ns = seq
        .section_windows
        .iter()
        .flatten()
        .map(|w| w.len_ns)
        .next()
        .ok_or_else(|| EngineError::Config("sequence has no readout windows".into()))?;
    let window_len = readout_ns as f64 * 1e-9;
    if run.averaging == Averaging::Pn && hist_dt > window_len / 2.0 {
        return Err(EngineError::Config(format!(
            "PN averaging needs a daq resolution finer than half a readout pulse ({hist_dt:e} s vs {window_len:e} s)"
        )));
    }
    let plan = run.plan.excluding(lab.cfg.engine.early_exclusion as f64 * hist_dt);
    plan.check()?;
    if plan.reference.1 > window_len * (1.0 + 1e-12) {
        return Err(EngineError::Config("window plan extends past the readout window".into()));
    }
    let detector = lab.detector(&run.detector)?;
    let analog_dt = {
        let bw = detector.config.analog.bandwidth;
        hist_dt / (hist_dt * 10.0 * bw - 1e-9).ceil().max(1.0)
    };
    let noiseless = detector.config.noiseless;
    let poisson = detector.config.kind == DetectorKind::DigitalPc && !noiseless;
    let nv = seq.variants.len();
    let np = seq.params.len();
    let nb = (window_len / hist_dt + 1e-9).floor() as usize;
    let tree = SeedTree::new(run.seed);
    let lab_ref: &VirtualLab = lab;
    let mut w = Walker {
        lab: lab_ref,
        run,
        seq,
        cache: PrepCache::new(lab_ref, &tree.child(K_SPIN)),
        driver: LaserDriver::new(lab_ref.cfg.laser, tree.stream(&[K_LASER])),
        tree,
        detector,
        hist_dt,
        nb,
        analog_dt,
        bright: lab_ref.bright_rate(),
        tau: lab_ref.cfg.spin.tau_pol_at(lab_ref.pump_rate()),
        noiseless,
        out: RawRun {
            kind: seq.kind,
            params: seq.params.clone(),
            variants: seq.variants.clone(),
            averaging: seq.averaging,
            sync_method: seq.sync_method,
            daq_mode: run.daq_mode,
            hist_dt,
            window_len,
            histograms: vec![vec![vec![0.0; nb]; np]; nv],
            window_counts: vec![vec![0; np]; nv],
            windows_expected: seq.window_count(),
            windows_mapped: 0,
            sync_edges: 0,
            series_traces: Vec::new(),
            recorded_total: 0.0,
            discarded_total: 0.0,
            last_samples: None,
            snr_history: Vec::new(),
            log: Vec::new(),
            partial: false,
            duration: 0.0,
        },
        running: Running {
            sig: vec![vec![0.0; np]; nv],
            refs: vec![vec![0.0; np]; nv],
            seen: vec![vec![false; np]; nv],
            plan,
            w_sig: bin_weights(nb, hist_dt, plan.signal),
            w_ref: bin_weights(nb, hist_dt, plan.reference),
            poisson,
        },
        pending: VecDeque::new(),
        prep: Vec::new(),
        after_laser: false,
        laser_start: None,
        laser_sync: false,
        prev_sync: false,
        last_laser_end: None,
        pulse_index: 0,
        series: None,
        series_count: 0,
        slot_acc: Vec::new(),
        slot_windows: Vec::new(),
        slot_series: Vec::new(),
        scratch: Vec::new(),
        overflow: false,
    };
    let total_ns = seq.program.duration_ns().max(1);
    let every = (seq.repeats / 200).max(1);
    let mut t = 0u64;
    let mut aborted = false;
    let mut reps_done = 0u32;
    'walk: for _ in 0..seq.program.repetitions {
        for (si, sec) in seq.program.sections.iter().enumerate() {
            for _ in 0..sec.repeat {
                let t0 = t;
                for tpl in &seq.section_windows[si] {
                    w.pending.push_back((t0 + tpl.offset_ns, tpl.param, tpl.variant.index()));
                }
                for ins in &sec.instructions {
                    w.step(ins.mask, ins.mw_phase, t, ins.duration_ns)?;
                    t += ins.duration_ns;
                    if w.overflow {
                        aborted = true;
                        break 'walk;
                    }
                }
                // section boundaries
                let (emit, param) = match seq.averaging {
                    Averaging::Pn => {
                        reps_done += 1;
                        let snr = w.running.snr();
                        if let Some(s) = snr {
                            w.out.snr_history.push(s);
                        }
                        (reps_done % every == 0 || reps_done == seq.repeats, None)
                    }
                    Averaging::Np => {
                        let p = (si / 3).min(np.saturating_sub(1));
                        (si % 3 == 2, Some(seq.params[p]))
                    }
                };
                let snr = w.running.snr();
                if emit {
                    if seq.averaging == Averaging::Np {
                        if let Some(s) = snr {
                            w.out.snr_history.push(s);
                        }
                    }
                    let rep = if seq.averaging == Averaging::Pn { reps_done } else { seq.repeats };
                    hooks.partial(w.running.partial(&seq.params, rep, snr));
                }
                let elapsed = t as f64 * 1e-9;
                if !hooks.checkpoint(t as f64 / total_ns as f64, param, snr, elapsed) {
                    aborted = true;
                    break 'walk;
                }
            }
        }
    }
    if !aborted {
        if let Some(a) = w.laser_start.take() {
            w.finish_pulse(a, t)?;
        }
        w.finish_series(t)?;
    }
    w.map_series()?;
    let mut out = w.out;
    out.partial = aborted;
    out.duration = t as f64 * 1e-9;
    if !aborted && out.windows_mapped != out.windows_expected {
        out.log.push(format!("mapped {} of {} expected windows", out.windows_mapped, out.windows_expected));
    }
    lab.clock += out.duration;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LabConfig;
    use crate::engine::NoHooks;
    use crate::instruments::HardwareConstraints;
    use crate::sequence::{compile, SequenceSpec};

    fn noiseless_lab() -> VirtualLab {
        let mut cfg = LabConfig::default();
        cfg.detectors.get_mut("apd").unwrap().noiseless = true;
        cfg.mw.frequency_hz = crate::spin::resonance_frequencies(&cfg.spin, &cfg.field.bias()).unwrap()[0].frequency;
        VirtualLab::new(cfg)
    }

    fn rabi(avg: Averaging, sync: SyncMethod, n: u32) -> PulsedRequest {
        let spec = SequenceSpec::new(SequenceKind::Rabi, vec![0.0, 50e-9, 100e-9]);
        let seq = compile(&spec, &HardwareConstraints::default(), sync, avg, n).unwrap();
        PulsedRequest { seq, run: RunConfig { averaging: avg, sync, repeats: n, ..Default::default() } }
    }

    #[test]
    fn single_window_count() {
        let mut lab = noiseless_lab();
        let mut req = rabi(Averaging::Np, SyncMethod::Method2, 1);
        req.seq.params.truncate(1);
        let spec = SequenceSpec::new(SequenceKind::Rabi, vec![40e-9]);
        req.seq = compile(&spec, &HardwareConstraints::default(), SyncMethod::Method2, Averaging::Np, 1).unwrap();
        let r = run_pulsed(&mut lab, &req, &NoHooks).unwrap();
        assert_eq!(r.windows_mapped, 1);
        assert_eq!(r.windows_expected, 1);
    }

    #[test]
    fn mismatch_is_config_error() {
        let mut lab = noiseless_lab();
        let mut req = rabi(Averaging::Pn, SyncMethod::Method2, 2);
        req.run.averaging = Averaging::Np;
        assert!(matches!(run_pulsed(&mut lab, &req, &NoHooks), Err(EngineError::Config(_))));
    }

    #[test]
    fn np_pn_agree_noiseless() {
        let a = run_pulsed(&mut noiseless_lab(), &rabi(Averaging::Np, SyncMethod::Method2, 3), &NoHooks).unwrap();
        let b = run_pulsed(&mut noiseless_lab(), &rabi(Averaging::Pn, SyncMethod::Method2, 3), &NoHooks).unwrap();
        let plan = WindowPlan::default();
        let (sa, sb) = (a.signals(&plan).unwrap(), b.signals(&plan).unwrap());
        for (x, y) in sa[0].iter().zip(&sb[0]) {
            assert!((x - y).abs() <= 1e-9 * x.abs());
        }
        assert!(sa[0][2] < sa[0][0], "{:?}", sa);
    }

    #[test]
    fn method1_counts_conserved() {
        let mut lab = VirtualLab::new(LabConfig::default());
        let r = run_pulsed(&mut lab, &rabi(Averaging::Pn, SyncMethod::Method1, 4), &NoHooks).unwrap();
        assert_eq!(r.windows_mapped, r.windows_expected);
        assert_eq!(r.sync_edges, 8);
        let mapped: f64 = r.histograms.iter().flatten().flatten().sum();
        assert!((mapped + r.discarded_total - r.recorded_total).abs() < 1e-6 * r.recorded_total.max(1.0));
    }
}
