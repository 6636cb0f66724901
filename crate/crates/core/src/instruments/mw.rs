use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Instrument;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MwError {
    #[error("cannot step the microwave source in CW mode")]
    CwMode,
    #[error("microwave output is off")]
    OutputOff,
    #[error("invalid microwave configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MwMode {
    Cw,
    Sweep,
    List,
}

/// Step issued sooner than the source can settle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingViolation {
    pub at: f64,
    pub since_last: f64,
    pub min_dwell: f64,
}

/// Microwave generator state, stepped by TTL triggers in sweep or list mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MwSourceState {
    pub mode: MwMode,
    pub cw_frequency: f64,
    /// (start, stop, step) in Hz.
    pub sweep: (f64, f64, f64),
    pub list: Vec<f64>,
    pub cursor: usize,
    pub power_dbm: f64,
    pub output_on: bool,
    pub min_dwell: f64,
    /// Drive strength (Rabi frequency, Hz) delivered at `ref_power_dbm`.
    pub rabi_at_ref: f64,
    pub ref_power_dbm: f64,
    /// Per-Hz antenna heating offset applied to the emitted frequency. Zero disables it.
    pub heating_coefficient: f64,
    pub last_step_at: Option<f64>,
}

impl Default for MwSourceState {
    fn default() -> Self {
        Self {
            mode: MwMode::Cw,
            cw_frequency: 2.87e9,
            sweep: (2.8e9, 2.9e9, 1e6),
            list: Vec::new(),
            cursor: 0,
            power_dbm: 0.0,
            output_on: true,
            min_dwell: 1e-3,
            rabi_at_ref: 5e6,
            ref_power_dbm: 0.0,
            heating_coefficient: 0.0,
            last_step_at: None,
        }
    }
}

impl MwSourceState {
    pub fn sweep_points(&self) -> usize {
        let (a, b, s) = self.sweep;
        if !(s > 0.0) || b < a {
            return 1;
        }
        ((b - a) / s + 1e-9).floor() as usize + 1
    }

    pub fn configure_sweep(&mut self, start: f64, stop: f64, step: f64) -> Result<(), MwError> {
        if !(step > 0.0) || stop < start {
            return Err(MwError::Config(format!("bad sweep ({start}, {stop}, {step})")));
        }
        self.mode = MwMode::Sweep;
        self.sweep = (start, stop, step);
        self.cursor = 0;
        Ok(())
    }

    pub fn configure_list(&mut self, list: Vec<f64>) -> Result<(), MwError> {
        if list.is_empty() {
            return Err(MwError::Config("empty frequency list".into()));
        }
        self.mode = MwMode::List;
        self.list = list;
        self.cursor = 0;
        Ok(())
    }

    /// Frequency currently emitted (Hz).
    pub fn frequency(&self) -> f64 {
        let f = match self.mode {
            MwMode::Cw => self.cw_frequency,
            MwMode::Sweep => {
                let (a, _, s) = self.sweep;
                a + self.cursor as f64 * s
            }
            MwMode::List => self.list[self.cursor],
        };
        f + self.heating_coefficient * (f - self.cw_frequency)
    }

    /// Rabi frequency (Hz) produced at the current power; zero with output off.
    pub fn rabi_frequency(&self) -> f64 {
        if !self.output_on {
            return 0.0;
        }
        self.rabi_at_ref * 10f64.powf((self.power_dbm - self.ref_power_dbm) / 20.0)
    }
}

/// Advance the source on a trigger received at time `now` (s).
pub fn mw_step(
    state: &MwSourceState,
    now: f64,
) -> Result<(MwSourceState, Option<TimingViolation>), MwError> {
    if state.mode == MwMode::Cw {
        return Err(MwError::CwMode);
    }
    if !state.output_on {
        return Err(MwError::OutputOff);
    }
    let mut next = state.clone();
    let len = match state.mode {
        MwMode::Sweep => state.sweep_points(),
        MwMode::List => state.list.len(),
        MwMode::Cw => unreachable!(),
    };
    next.cursor = (state.cursor + 1) % len;
    let violation = state.last_step_at.and_then(|last| {
        let since = now - last;
        (since < state.min_dwell * (1.0 - 1e-9)).then(|| TimingViolation {
            at: now,
            since_last: since,
            min_dwell: state.min_dwell,
        })
    });
    next.last_step_at = Some(now);
    Ok((next, violation))
}

impl Instrument for MwSourceState {
    fn name(&self) -> &'static str {
        "mw_source"
    }
    fn dummy_info(&self) -> String {
        format!(
            "virtual MW generator: mode {:?}, {:.6} GHz, {:.1} dBm, output {}, min dwell {} s",
            self.mode,
            self.frequency() / 1e9,
            self.power_dbm,
            if self.output_on { "on" } else { "off" },
            self.min_dwell
        )
    }
}

/// External MW switch carving pulses out of the CW tone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MwSwitch {
    /// Linear rise and fall time of the pulse envelope (s). Zero gives square pulses.
    pub rise_time: f64,
}

impl Default for MwSwitch {
    fn default() -> Self {
        Self { rise_time: 0.0 }
    }
}

const RAMP_STEPS: usize = 8;

impl MwSwitch {
    /// Piecewise-constant envelope `(duration, relative amplitude)` of a gate of length `gate`.
    pub fn envelope(&self, gate: f64) -> Vec<(f64, f64)> {
        if self.rise_time <= 0.0 {
            return vec![(gate, 1.0)];
        }
        let ramp = self.rise_time.min(gate / 2.0);
        let step = ramp / RAMP_STEPS as f64;
        let mut out = Vec::with_capacity(2 * RAMP_STEPS + 1);
        for k in 0..RAMP_STEPS {
            out.push((step, ((k as f64 + 0.5) * step / self.rise_time).min(1.0)));
        }
        let flat = gate - 2.0 * ramp;
        if flat > 0.0 {
            out.push((flat, 1.0));
        }
        for k in (0..RAMP_STEPS).rev() {
            out.push((step, ((k as f64 + 0.5) * step / self.rise_time).min(1.0)));
        }
        out
    }
}

impl Instrument for MwSwitch {
    fn name(&self) -> &'static str {
        "mw_switch"
    }
    fn dummy_info(&self) -> String {
        format!("virtual MW switch: rise/fall {} s", self.rise_time)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep() -> MwSourceState {
        let mut s = MwSourceState::default();
        s.configure_sweep(2.8e9, 2.9e9, 0.01e9).unwrap();
        s
    }

    #[test]
    fn sweep_wraps_at_stop() {
        let mut s = sweep();
        s.cursor = 10;
        assert!((s.frequency() - 2.9e9).abs() < 1.0);
        let (n, _) = mw_step(&s, 0.0).unwrap();
        assert!((n.frequency() - 2.8e9).abs() < 1.0);
    }

    #[test]
    fn sweep_cycle_length() {
        let mut s = sweep();
        for k in 0..11 {
            s = mw_step(&s, k as f64 * 1e-3).unwrap().0;
        }
        assert_eq!(s.cursor, 0);
    }

    #[test]
    fn list_order_is_kept() {
        let mut s = MwSourceState::default();
        s.configure_list(vec![3.0e9, 1.0e9, 2.0e9]).unwrap();
        let mut seen = vec![s.frequency()];
        for k in 0..3 {
            s = mw_step(&s, k as f64).unwrap().0;
            seen.push(s.frequency());
        }
        assert_eq!(seen, vec![3.0e9, 1.0e9, 2.0e9, 3.0e9]);
    }

    #[test]
    fn cw_mode_refuses_steps() {
        assert_eq!(mw_step(&MwSourceState::default(), 0.0), Err(MwError::CwMode));
    }

    #[test]
    fn fast_steps_are_flagged() {
        let s = sweep();
        let (s, v) = mw_step(&s, 0.0).unwrap();
        assert!(v.is_none());
        let (_, v) = mw_step(&s, 0.5e-3).unwrap();
        assert!(v.is_some());
    }

    #[test]
    fn rabi_scales_with_amplitude() {
        let mut s = MwSourceState::default();
        s.power_dbm = 6.0206;
        assert!((s.rabi_frequency() / 10e6 - 1.0).abs() < 1e-4);
        s.output_on = false;
        assert_eq!(s.rabi_frequency(), 0.0);
    }

    #[test]
    fn envelope_area() {
        let sw = MwSwitch { rise_time: 20e-9 };
        let area: f64 = sw.envelope(100e-9).iter().map(|(d, a)| d * a).sum();
        assert!((area - 80e-9).abs() < 1e-15);
        let total: f64 = sw.envelope(100e-9).iter().map(|(d, _)| d).sum();
        assert!((total - 100e-9).abs() < 1e-15);
    }
}
