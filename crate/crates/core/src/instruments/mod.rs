//! Virtual instruments.
//!
//! Every instrument is a plain state machine behind the same contract a
//! hardware driver would expose, plus a `dummy_info` string describing the
//! simulated device for operator displays.

pub mod daq;
pub mod detector;
pub mod laser;
pub mod mw;
pub mod pulser;
pub mod sample;
pub mod scanner;

pub use daq::{daq_acquire, DaqConfig, DaqError, DaqMode, RawSamples};
pub use detector::{
    detect, AnalogParams, AnalogTrace, Detection, Detector, DetectorConfig, DetectorError, DetectorKind,
    DigitalParams, PhotonEvents, RateSource, RateTrace,
};
pub use laser::{laser_emit, LaserDriver, LaserModel, LaserPulse, PowerTrace, RinDrift};
pub use mw::{mw_step, MwError, MwMode, MwSourceState, MwSwitch, TimingViolation};
pub use pulser::{HardwareConstraints, Instruction, PulseProgram, Section, CH_LASER, CH_MW, CH_SYNC};
pub use daq::Daq;
pub use pulser::VirtualPulser;
pub use sample::{confocal_rate, Emitter, VirtualSample};
pub use scanner::{scanner_waveforms, AxisPlan, ScanPlan, ScanWaveforms, ScannerConfig, ScannerError};

/// Common surface of every virtual device.
pub trait Instrument {
    fn name(&self) -> &'static str;
    fn dummy_info(&self) -> String;
}
