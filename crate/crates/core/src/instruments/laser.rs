use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Instrument;

/// Slow relative-intensity drift, modelled as an Ornstein-Uhlenbeck process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RinDrift {
    pub sigma: f64,
    pub correlation_time: f64,
    /// Deterministic linear drift (fraction per second of lab time).
    pub ramp: f64,
}

impl Default for RinDrift {
    fn default() -> Self {
        Self { sigma: 0.0, correlation_time: 1e-3, ramp: 0.0 }
    }
}

/// Modulated pump laser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaserModel {
    /// Set-point power (W).
    pub set_power: f64,
    /// Relative overshoot at turn-on after a long off period.
    pub overshoot_amplitude: f64,
    pub overshoot_decay: f64,
    /// Off time over which the overshoot recovers.
    pub thermal_memory: f64,
    pub rise_time: f64,
    pub drift: RinDrift,
    /// Optical pump rate per watt at the focus (1/(s W)).
    pub pump_rate_per_watt: f64,
}

impl Default for LaserModel {
    fn default() -> Self {
        Self {
            set_power: 1e-3,
            overshoot_amplitude: 0.0,
            overshoot_decay: 50e-9,
            thermal_memory: 1e-6,
            rise_time: 0.0,
            drift: RinDrift::default(),
            pump_rate_per_watt: 1.0 / 300e-9 / 1e-3,
        }
    }
}

impl LaserModel {
    /// Pump rate at the set power, ignoring transients.
    pub fn pump_rate(&self) -> f64 {
        self.set_power * self.pump_rate_per_watt
    }

    /// Overshoot amplitude after an off period of `off` seconds.
    pub fn lead(&self, off: f64) -> f64 {
        if self.overshoot_amplitude == 0.0 {
            return 0.0;
        }
        if off.is_infinite() {
            return self.overshoot_amplitude;
        }
        self.overshoot_amplitude * (1.0 - (-off / self.thermal_memory).exp())
    }
}

impl Instrument for LaserModel {
    fn name(&self) -> &'static str {
        "laser"
    }
    fn dummy_info(&self) -> String {
        format!(
            "virtual pump laser: {:.3} mW, overshoot {:.1}%, drift sigma {}",
            self.set_power * 1e3,
            self.overshoot_amplitude * 100.0,
            self.drift.sigma
        )
    }
}

/// One emitted laser pulse with its transient parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserPulse {
    pub start: f64,
    pub duration: f64,
    pub set_power: f64,
    pub lead: f64,
    pub overshoot_decay: f64,
    pub rise_time: f64,
    /// Multiplicative drift factor for the whole pulse.
    pub drift: f64,
}

impl LaserPulse {
    /// Power (W) at `t` seconds into the pulse.
    pub fn power_at(&self, t: f64) -> f64 {
        if t < 0.0 || t >= self.duration {
            return 0.0;
        }
        let ramp = if self.rise_time > 0.0 { (t / self.rise_time).min(1.0) } else { 1.0 };
        let over = if self.lead != 0.0 { 1.0 + self.lead * (-t / self.overshoot_decay).exp() } else { 1.0 };
        self.set_power * self.drift * over * ramp
    }

    /// Mean power over the pulse.
    pub fn mean_power(&self) -> f64 {
        let n = 256;
        let dt = self.duration / n as f64;
        (0..n).map(|k| self.power_at((k as f64 + 0.5) * dt)).sum::<f64>() / n as f64
    }
}

/// Laser output for a whole command waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTrace {
    pub duration: f64,
    pub pulses: Vec<LaserPulse>,
}

impl PowerTrace {
    pub fn power_at(&self, t: f64) -> f64 {
        self.pulses
            .iter()
            .find(|p| t >= p.start && t < p.start + p.duration)
            .map_or(0.0, |p| p.power_at(t - p.start))
    }
}

/// Streaming laser driver; keeps drift and off-time state between pulses.
#[derive(Debug, Clone)]
pub struct LaserDriver {
    pub model: LaserModel,
    drift_state: f64,
    last_start: Option<f64>,
    last_end: Option<f64>,
    rng: ChaCha8Rng,
}

impl LaserDriver {
    pub fn new(model: LaserModel, rng: ChaCha8Rng) -> Self {
        Self { model, drift_state: 0.0, last_start: None, last_end: None, rng }
    }

    /// Emit a pulse starting at absolute time `start`. The off time is measured
    /// from the previous pulse, or taken as `initial_off` for the first one.
    pub fn emit(&mut self, start: f64, duration: f64, initial_off: f64) -> LaserPulse {
        let off = self.last_end.map_or(initial_off, |e| (start - e).max(0.0));
        let d = self.model.drift;
        if d.sigma > 0.0 {
            let dt = self.last_start.map_or(f64::INFINITY, |s| (start - s).max(0.0));
            let keep = (-dt / d.correlation_time).exp();
            let xi: f64 = StandardNormal.sample(&mut self.rng);
            self.drift_state = self.drift_state * keep + d.sigma * (1.0 - keep * keep).sqrt() * xi;
        }
        self.last_start = Some(start);
        self.last_end = Some(start + duration);
        LaserPulse {
            start,
            duration,
            set_power: self.model.set_power,
            lead: self.model.lead(off),
            overshoot_decay: self.model.overshoot_decay,
            rise_time: self.model.rise_time,
            drift: (1.0 + self.drift_state + d.ramp * start).max(0.0),
        }
    }
}

/// Render a command waveform given as `(on, duration)` segments.
pub fn laser_emit(command: &[(bool, f64)], model: &LaserModel, seed: u64) -> PowerTrace {
    let mut driver = LaserDriver::new(*model, ChaCha8Rng::seed_from_u64(seed));
    let mut t = 0.0;
    let mut pulses = Vec::new();
    let mut on_start: Option<f64> = None;
    let mut off_since = 0.0;
    let mut first = true;
    for &(on, dur) in command {
        match (on, on_start) {
            (true, None) => on_start = Some(t),
            (false, Some(s)) => {
                let init = if first { s - off_since } else { 0.0 };
                let init = if init <= 0.0 && first { f64::INFINITY } else { init };
                pulses.push(driver.emit(s, t - s, init));
                first = false;
                on_start = None;
                off_since = t;
            }
            _ => {}
        }
        t += dur;
    }
    if let Some(s) = on_start {
        let init = if first { if s > 0.0 { s } else { f64::INFINITY } } else { 0.0 };
        pulses.push(driver.emit(s, t - s, init));
    }
    PowerTrace { duration: t, pulses }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> LaserModel {
        LaserModel { overshoot_amplitude: 0.2, overshoot_decay: 30e-9, thermal_memory: 2e-6, ..Default::default() }
    }

    #[test]
    fn identical_gaps_give_identical_pulses() {
        let mut cmd = Vec::new();
        for _ in 0..5 {
            cmd.push((false, 1e-6));
            cmd.push((true, 2e-6));
        }
        let tr = laser_emit(&cmd, &model(), 1);
        assert_eq!(tr.pulses.len(), 5);
        for p in &tr.pulses {
            assert!((p.lead - tr.pulses[0].lead).abs() < 1e-15);
            assert!((p.duration - 2e-6).abs() < 1e-15);
        }
    }

    #[test]
    fn longer_off_means_more_overshoot() {
        let m = model();
        assert!(m.lead(5e-6) > m.lead(1e-6));
        assert!(m.lead(f64::INFINITY) <= m.overshoot_amplitude);
        assert_eq!(LaserModel::default().lead(1.0), 0.0);
    }

    #[test]
    fn overshoot_decays_to_set_power() {
        let p = laser_emit(&[(false, 1e-6), (true, 3e-6)], &model(), 0).pulses[0];
        assert!((p.power_at(0.0) / 1e-3 - 1.0 - 0.2 * (1.0 - (-0.5f64).exp())).abs() < 1e-12);
        assert!((p.power_at(2e-6) - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn drift_is_reproducible() {
        let m = LaserModel { drift: RinDrift { sigma: 0.05, correlation_time: 1e-5, ramp: 0.0 }, ..Default::default() };
        let cmd: Vec<_> = (0..20).flat_map(|_| [(true, 1e-6), (false, 1e-6)]).collect();
        let a = laser_emit(&cmd, &m, 7);
        let b = laser_emit(&cmd, &m, 7);
        assert_eq!(a, b);
        assert!(a.pulses.iter().any(|p| (p.drift - 1.0).abs() > 1e-6));
    }
}
