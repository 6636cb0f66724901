use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::detector::Detection;
use super::Instrument;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DaqError {
    #[error("acquisition mode {mode:?} cannot digest {input} input")]
    ModeMismatch { mode: DaqMode, input: &'static str },
    #[error("DAQ buffer overrun at sample {index}")]
    Overrun { index: usize },
    #[error("invalid DAQ configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaqMode {
    Analog,
    BinnedCounts,
    TimeTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaqConfig {
    /// ADC conversion time per channel (s).
    pub adc_period: f64,
    pub counter_clock: f64,
    pub n_analog_channels: u32,
    pub buffer_capacity: usize,
    /// Counter reset period in binned-count mode (s).
    pub bin_period: f64,
}

impl Default for DaqConfig {
    fn default() -> Self {
        Self {
            adc_period: 0.5e-6,
            counter_clock: 100e6,
            n_analog_channels: 1,
            buffer_capacity: 1 << 26,
            bin_period: 0.5e-6,
        }
    }
}

impl DaqConfig {
    pub fn validate(&self) -> Result<(), DaqError> {
        if !(self.adc_period > 0.0 && self.counter_clock > 0.0 && self.bin_period > 0.0) {
            return Err(DaqError::Config("periods and clock must be positive".into()));
        }
        if self.n_analog_channels == 0 || self.buffer_capacity == 0 {
            return Err(DaqError::Config("channel count and buffer capacity must be at least 1".into()));
        }
        Ok(())
    }

    /// Per-channel analog sample period when all channels are multiplexed.
    pub fn analog_period(&self) -> f64 {
        self.n_analog_channels as f64 * self.adc_period
    }

    /// Time-tag resolution; both clock edges are counted.
    pub fn tag_resolution(&self) -> f64 {
        1.0 / (2.0 * self.counter_clock)
    }

    /// Tag index of an event at `t`, floored to the preceding half-clock edge.
    pub fn quantize(&self, t: f64) -> u64 {
        (t / self.tag_resolution() + 1e-9).floor().max(0.0) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RawSamples {
    Analog { period: f64, values: Vec<f64> },
    Binned { period: f64, counts: Vec<u64> },
    /// Tags in units of `resolution`.
    TimeTags { resolution: f64, tags: Vec<u64> },
    /// Expected counts per bin from a noiseless counter.
    Expected { period: f64, counts: Vec<f64> },
}

impl RawSamples {
    pub fn len(&self) -> usize {
        match self {
            RawSamples::Analog { values, .. } => values.len(),
            RawSamples::Binned { counts, .. } => counts.len(),
            RawSamples::TimeTags { tags, .. } => tags.len(),
            RawSamples::Expected { counts, .. } => counts.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_capacity(n: usize, cfg: &DaqConfig) -> Result<(), DaqError> {
    if n > cfg.buffer_capacity {
        Err(DaqError::Overrun { index: cfg.buffer_capacity })
    } else {
        Ok(())
    }
}

fn rebin(dt: f64, values: &[f64], period: f64) -> Vec<f64> {
    let n = (dt * values.len() as f64 / period + 1e-9).floor() as usize;
    let mut out = vec![0.0; n];
    for (k, v) in values.iter().enumerate() {
        let b = ((k as f64 + 0.5) * dt / period) as usize;
        if b < n {
            out[b] += v;
        }
    }
    out
}

/// Digitize a detector output in the requested acquisition mode.
pub fn daq_acquire(input: &Detection, mode: DaqMode, cfg: &DaqConfig) -> Result<RawSamples, DaqError> {
    cfg.validate()?;
    match (input, mode) {
        (Detection::Analog(tr), DaqMode::Analog) => {
            let period = cfg.analog_period();
            let total = tr.dt * tr.values.len() as f64;
            let n = (total / period - 1e-9).ceil().max(0.0) as usize;
            check_capacity(n, cfg)?;
            let values = (0..n)
                .map(|j| {
                    let idx = ((j as f64 * period) / tr.dt + 1e-9).floor() as usize;
                    tr.values[idx.min(tr.values.len() - 1)]
                })
                .collect();
            Ok(RawSamples::Analog { period, values })
        }
        (Detection::Photons(p), DaqMode::BinnedCounts) => {
            let n = (p.duration / cfg.bin_period + 1e-9).floor() as usize;
            check_capacity(n, cfg)?;
            let mut counts = vec![0u64; n];
            for &t in &p.times {
                let b = (t / cfg.bin_period) as usize;
                if b < n {
                    counts[b] += 1;
                }
            }
            Ok(RawSamples::Binned { period: cfg.bin_period, counts })
        }
        (Detection::Photons(p), DaqMode::TimeTag) => {
            check_capacity(p.times.len(), cfg)?;
            Ok(RawSamples::TimeTags {
                resolution: cfg.tag_resolution(),
                tags: p.times.iter().map(|&t| cfg.quantize(t)).collect(),
            })
        }
        (Detection::Expected { dt, counts }, DaqMode::BinnedCounts | DaqMode::TimeTag) => {
            let period = if mode == DaqMode::TimeTag { cfg.tag_resolution() } else { cfg.bin_period };
            let out = if (period - dt).abs() <= 1e-12 * period { counts.clone() } else { rebin(*dt, counts, period) };
            check_capacity(out.len(), cfg)?;
            Ok(RawSamples::Expected { period, counts: out })
        }
        (Detection::Analog(_), m) => Err(DaqError::ModeMismatch { mode: m, input: "analog" }),
        (_, m) => Err(DaqError::ModeMismatch { mode: m, input: "photon" }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Daq(pub DaqConfig);

impl Instrument for Daq {
    fn name(&self) -> &'static str {
        "daq"
    }
    fn dummy_info(&self) -> String {
        format!(
            "virtual DAQ: {} analog channel(s) at {} s, counter clock {:.1} MHz (tag resolution {} s)",
            self.0.n_analog_channels,
            self.0.analog_period(),
            self.0.counter_clock / 1e6,
            self.0.tag_resolution()
        )
    }
}
