//! Acquisition engine: wires the virtual instruments together, executes CW,
//! pulsed and scan runs, and streams live partial results.

mod bus;
mod cw;
mod lab;
mod pulsed;
mod scan;

pub use bus::{Frame, LiveBus, Partial, Subscription};
pub use cw::{run_cw, CwRequest, CwResult, SweepOrder};
pub use lab::VirtualLab;
pub use pulsed::{run_pulsed, PulsedRequest, RawRun};
pub use scan::{run_scan, ScanRequest, ScanResult};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;
use thiserror::Error;

use crate::config::{check_route, ConfigError, LabConfig};
use crate::dsp::{DspError, ExtractionConfig, WindowPlan};
use crate::protocols::{run_protocol, ProtocolError, ProtocolKind, ProtocolParams, ProtocolRecord};
use crate::instruments::{DaqError, DaqMode, DetectorError, MwError, ScannerError};
use crate::sequence::{Averaging, SyncMethod};
use crate::spin::SpinError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("engine busy with run {0}")]
    Busy(u64),
    #[error("run {0} is not active")]
    StaleHandle(u64),
    #[error("run configuration: {0}")]
    Config(String),
    #[error("dwell {dwell} s is below the source minimum {min} s")]
    Timing { dwell: f64, min: f64 },
    #[error("{0}")]
    Lab(String),
    #[error(transparent)]
    Daq(#[from] DaqError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Scanner(#[from] ScannerError),
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error(transparent)]
    Mw(#[from] MwError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("run worker failed: {0}")]
    Worker(String),
    #[error(transparent)]
    Protocol(Box<ProtocolError>),
}

impl EngineError {
    /// Short machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::Busy(_) => "busy",
            EngineError::StaleHandle(_) => "stale_handle",
            EngineError::Config(_) => "config",
            EngineError::Timing { .. } => "timing",
            EngineError::Lab(_) => "lab",
            EngineError::Daq(_) => "daq",
            EngineError::Detector(_) => "detector",
            EngineError::Scanner(_) => "scanner",
            EngineError::Spin(_) => "spin",
            EngineError::Mw(_) => "mw",
            EngineError::Dsp(_) => "analysis",
            EngineError::Worker(_) => "worker",
            EngineError::Protocol(p) => p.code(),
        }
    }
}

impl From<ProtocolError> for EngineError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Engine(inner) => inner,
            other => EngineError::Protocol(Box::new(other)),
        }
    }
}

impl From<ConfigError> for EngineError {
    fn from(e: ConfigError) -> Self {
        EngineError::Lab(e.to_string())
    }
}

/// How one run is wired and averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub detector: String,
    pub daq_mode: DaqMode,
    pub averaging: Averaging,
    pub sync: SyncMethod,
    /// Repetitions (pulsed) or sweeps (CW).
    pub repeats: u32,
    pub seed: u64,
    pub sweep_order: SweepOrder,
    /// Locate method-1 readout pulses by extraction instead of the declared windows.
    pub blind: bool,
    pub extraction: ExtractionConfig,
    pub plan: WindowPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            detector: "apd".into(),
            daq_mode: DaqMode::TimeTag,
            averaging: Averaging::Pn,
            sync: SyncMethod::Method2,
            repeats: 1,
            seed: 1,
            sweep_order: SweepOrder::Up,
            blind: false,
            extraction: ExtractionConfig::default(),
            plan: WindowPlan::default(),
        }
    }
}

impl RunConfig {
    /// Defaults for `protocol` taken from the lab wiring.
    pub fn for_protocol(cfg: &LabConfig, protocol: &str) -> Self {
        let route = cfg.wiring.route(protocol);
        Self { detector: route.detector.clone(), daq_mode: route.daq_mode, seed: cfg.seed, ..Default::default() }
    }

    pub fn validate(&self, cfg: &LabConfig) -> Result<(), EngineError> {
        let route = crate::config::Route { detector: self.detector.clone(), daq_mode: self.daq_mode };
        check_route(cfg, "run", &route)?;
        if self.repeats == 0 {
            return Err(EngineError::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of any run kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunOutput {
    Cw(CwResult),
    Pulsed(RawRun),
    Scan(ScanResult),
    Protocol(Box<ProtocolRecord>),
}

impl RunOutput {
    pub fn is_partial(&self) -> bool {
        match self {
            RunOutput::Cw(r) => r.partial,
            RunOutput::Pulsed(r) => r.partial,
            RunOutput::Scan(r) => r.partial,
            RunOutput::Protocol(r) => r.partial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunRequest {
    Cw(CwRequest),
    Pulsed(PulsedRequest),
    Scan(ScanRequest),
    Protocol { protocol: ProtocolKind, params: ProtocolParams },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Idle,
    Running,
    Paused,
    Finished,
    Aborted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub state: RunState,
    pub run_id: Option<u64>,
    pub progress: f64,
    pub current_param: Option<f64>,
    pub snr: Option<f64>,
}

impl Status {
    pub fn idle() -> Self {
        Self { state: RunState::Idle, run_id: None, progress: 0.0, current_param: None, snr: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Pause,
    Resume,
    Abort,
    Status,
}

/// Callbacks a run uses to report progress and honour control commands.
pub trait Hooks {
    /// Returns false when the run must stop.
    fn checkpoint(&self, progress: f64, param: Option<f64>, snr: Option<f64>, sim_elapsed: f64) -> bool;
    fn partial(&self, partial: Partial);
}

/// Hooks for direct, uncontrolled calls.
pub struct NoHooks;

impl Hooks for NoHooks {
    fn checkpoint(&self, _: f64, _: Option<f64>, _: Option<f64>, _: f64) -> bool {
        true
    }
    fn partial(&self, _: Partial) {}
}

/// Execute a request synchronously against `lab`.
pub fn execute(lab: &mut VirtualLab, req: &RunRequest, hooks: &dyn Hooks) -> Result<RunOutput, EngineError> {
    Ok(match req {
        RunRequest::Cw(r) => RunOutput::Cw(run_cw(lab, r, hooks)?),
        RunRequest::Pulsed(r) => RunOutput::Pulsed(run_pulsed(lab, r, hooks)?),
        RunRequest::Scan(r) => RunOutput::Scan(run_scan(lab, r, hooks)?),
        RunRequest::Protocol { protocol, params } => RunOutput::Protocol(Box::new(run_protocol(lab, *protocol, params, hooks)?)),
    })
}

struct Active {
    id: u64,
    status: Status,
    pause: bool,
    abort: bool,
}

#[derive(Default)]
struct Control {
    active: Option<Active>,
    results: HashMap<u64, Result<RunOutput, EngineError>>,
}

struct Inner {
    lab: Mutex<VirtualLab>,
    control: Mutex<Control>,
    cv: Condvar,
    bus: LiveBus,
    next_id: AtomicU64,
}

/// Handle of a started run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunHandle(pub u64);

/// Single-run engine driven from any thread.
#[derive(Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

struct EngineHooks {
    inner: Arc<Inner>,
    id: u64,
    real_time: bool,
    last_sim: Mutex<f64>,
}

impl Hooks for EngineHooks {
    fn checkpoint(&self, progress: f64, param: Option<f64>, snr: Option<f64>, sim_elapsed: f64) -> bool {
        if self.real_time {
            let mut last = self.last_sim.lock().unwrap();
            let dt = (sim_elapsed - *last).max(0.0);
            *last = sim_elapsed;
            drop(last);
            thread::sleep(Duration::from_secs_f64(dt.min(10.0)));
        }
        let mut c = self.inner.control.lock().unwrap();
        loop {
            let Some(a) = c.active.as_mut().filter(|a| a.id == self.id) else { return false };
            a.status.progress = progress.clamp(0.0, 1.0);
            a.status.current_param = param;
            if snr.is_some() {
                a.status.snr = snr;
            }
            if a.abort {
                return false;
            }
            if !a.pause {
                a.status.state = RunState::Running;
                return true;
            }
            a.status.state = RunState::Paused;
            c = self.inner.cv.wait(c).unwrap();
        }
    }

    fn partial(&self, partial: Partial) {
        self.inner.bus.publish(self.id, partial);
    }
}

impl Engine {
    pub fn new(cfg: LabConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let queue = cfg.engine.live_queue;
        Ok(Self {
            inner: Arc::new(Inner {
                lab: Mutex::new(VirtualLab::new(cfg)),
                control: Mutex::new(Control::default()),
                cv: Condvar::new(),
                bus: LiveBus::new(queue),
                next_id: AtomicU64::new(1),
            }),
        })
    }

    pub fn bus(&self) -> &LiveBus {
        &self.inner.bus
    }

    fn busy(&self) -> Option<u64> {
        self.inner.control.lock().unwrap().active.as_ref().map(|a| a.id)
    }

    /// Current configuration snapshot.
    pub fn config(&self) -> Result<LabConfig, EngineError> {
        if let Some(id) = self.busy() {
            return Err(EngineError::Busy(id));
        }
        Ok(self.inner.lab.lock().unwrap().cfg.clone())
    }

    /// Mutate the lab between runs.
    pub fn with_lab<T>(&self, f: impl FnOnce(&mut VirtualLab) -> T) -> Result<T, EngineError> {
        if let Some(id) = self.busy() {
            return Err(EngineError::Busy(id));
        }
        let mut lab: MutexGuard<'_, VirtualLab> = self.inner.lab.lock().unwrap();
        Ok(f(&mut lab))
    }

    pub fn start(&self, req: RunRequest) -> Result<RunHandle, EngineError> {
        let mut c = self.inner.control.lock().unwrap();
        if let Some(a) = &c.active {
            return Err(EngineError::Busy(a.id));
        }
        let id = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        c.active = Some(Active {
            id,
            status: Status { state: RunState::Running, run_id: Some(id), progress: 0.0, current_param: None, snr: None },
            pause: false,
            abort: false,
        });
        drop(c);
        let inner = Arc::clone(&self.inner);
        thread::spawn(move || {
            let mut lab = inner.lab.lock().unwrap();
            let hooks = EngineHooks { inner: Arc::clone(&inner), id, real_time: lab.cfg.engine.real_time, last_sim: Mutex::new(0.0) };
            let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| execute(&mut lab, &req, &hooks)))
                .unwrap_or_else(|e| {
                    let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                    Err(EngineError::Worker(msg.unwrap_or_else(|| "panic".into())))
                });
            drop(lab);
            let mut c = inner.control.lock().unwrap();
            c.active = None;
            c.results.insert(id, out);
            inner.cv.notify_all();
        });
        Ok(RunHandle(id))
    }

    /// Status of the active run, or idle.
    pub fn status(&self) -> Status {
        let c = self.inner.control.lock().unwrap();
        c.active.as_ref().map_or_else(Status::idle, |a| a.status.clone())
    }

    pub fn control(&self, handle: RunHandle, cmd: Command) -> Result<Status, EngineError> {
        let mut c = self.inner.control.lock().unwrap();
        let Some(a) = c.active.as_mut().filter(|a| a.id == handle.0) else {
            return Err(EngineError::StaleHandle(handle.0));
        };
        match cmd {
            Command::Pause => {
                a.pause = true;
                a.status.state = RunState::Paused;
            }
            Command::Resume => {
                a.pause = false;
                a.status.state = RunState::Running;
            }
            Command::Abort => {
                a.abort = true;
                a.pause = false;
            }
            Command::Status => {}
        }
        let s = a.status.clone();
        self.inner.cv.notify_all();
        Ok(s)
    }

    /// Block until the run ends and take its result.
    pub fn wait(&self, handle: RunHandle) -> Result<RunOutput, EngineError> {
        let mut c = self.inner.control.lock().unwrap();
        loop {
            if let Some(r) = c.results.remove(&handle.0) {
                return r;
            }
            if c.active.as_ref().is_none_or(|a| a.id != handle.0) && !c.results.contains_key(&handle.0) {
                return Err(EngineError::StaleHandle(handle.0));
            }
            c = self.inner.cv.wait(c).unwrap();
        }
    }

    pub fn run_blocking(&self, req: RunRequest) -> Result<RunOutput, EngineError> {
        let h = self.start(req)?;
        self.wait(h)
    }
}
