use std::collections::HashMap;
use std::f64::consts::PI;

use super::EngineError;
use crate::config::LabConfig;
use crate::instruments::detector::RateSource;
use crate::instruments::laser::LaserPulse;
use crate::instruments::{Detector, MwSourceState};
use crate::optics::OpticsReport;
use crate::rng::SeedTree;
use crate::spin::{apply_mw_pulse, nearest_transition, propagate_free, sample_detunings, Bloch, SpinState};

/// Configured virtual instruments plus the lab clock (s).
#[derive(Debug, Clone)]
pub struct VirtualLab {
    pub cfg: LabConfig,
    pub clock: f64,
    /// Scanner position (um) the pulsed and CW measurements are taken at.
    pub focus: [f64; 3],
}

/// Segment of spin manipulation between two laser pulses: `(mw_on, phase bits, ns)`.
pub(crate) type Prep = Vec<(bool, u64, u64)>;

impl VirtualLab {
    pub fn new(cfg: LabConfig) -> Self {
        Self { cfg, clock: 0.0, focus: [0.0; 3] }
    }

    pub fn pump_rate(&self) -> f64 {
        self.cfg.laser.pump_rate()
    }

    /// Detected rate of the addressed ensemble in `|0>`.
    pub fn bright_rate(&self) -> f64 {
        self.cfg.spin.bright_rate(self.pump_rate())
    }

    pub fn mw_source(&self) -> MwSourceState {
        let m = &self.cfg.mw;
        MwSourceState {
            cw_frequency: m.frequency_hz,
            power_dbm: m.power_dbm,
            min_dwell: m.min_dwell_s,
            rabi_at_ref: m.rabi_at_ref_hz,
            ref_power_dbm: m.ref_power_dbm,
            heating_coefficient: m.heating_coefficient,
            output_on: true,
            ..Default::default()
        }
    }

    /// Drive Rabi frequency (Hz) at the configured power.
    pub fn rabi_hz(&self) -> f64 {
        self.mw_source().rabi_frequency()
    }

    pub fn detector(&self, name: &str) -> Result<Detector, EngineError> {
        let d = self
            .cfg
            .detectors
            .get(name)
            .ok_or_else(|| EngineError::Config(format!("no detector named {name:?}")))?;
        Ok(Detector::new(*d)?)
    }

    pub fn optics(&self) -> Result<OpticsReport, EngineError> {
        Ok(self.cfg.optics.report()?)
    }

    /// Ensemble-averaged `|1>` population left by `prep`, starting either from
    /// thermal equilibrium or from the state a laser pulse leaves behind.
    pub(crate) fn prep_population(&self, prep: &Prep, after_laser: bool, detunings: &[f64]) -> f64 {
        let p = &self.cfg.spin;
        let field = self.cfg.field.bias();
        let relax = p.relaxation();
        let f_mw = self.cfg.mw.frequency_hz;
        let rabi = 2.0 * PI * self.rabi_hz();
        let start = if after_laser {
            SpinState { bloch: Bloch::GROUND, shelf: p.shelf_fraction }
        } else {
            SpinState { bloch: Bloch { u: 0.0, v: 0.0, w: p.w_thermal }, shelf: 0.0 }
        };
        let segments: Vec<(bool, f64, Vec<(f64, f64)>)> = prep
            .iter()
            .map(|&(mw, phase, ns)| {
                let d = ns as f64 * 1e-9;
                let env = if mw { self.cfg.mw.switch.envelope(d) } else { vec![(d, 0.0)] };
                (mw, f64::from_bits(phase), env)
            })
            .collect();
        let mut total = 0.0;
        for o in 0..p.orientations.len() {
            let base = nearest_transition(p, &field, o, f_mw) - f_mw;
            for &delta in detunings {
                let det = base + delta;
                let mut s = start;
                for (_, phase, env) in &segments {
                    for &(d, amp) in env {
                        s = if amp > 0.0 {
                            apply_mw_pulse(s, &relax, rabi * amp, det, d, *phase)
                        } else {
                            propagate_free(s, &relax, d, det)
                        };
                    }
                }
                total += s.p1();
            }
        }
        total / (p.orientations.len() * detunings.len().max(1)) as f64
    }

    pub(crate) fn detunings(&self, seed: &SeedTree) -> Vec<f64> {
        let k = self.cfg.engine.detuning_samples.max(1);
        sample_detunings(&self.cfg.spin, k, seed.child(0xDE7).root())
    }
}

/// Memo of prep populations.
pub(crate) struct PrepCache<'a> {
    lab: &'a VirtualLab,
    detunings: Vec<f64>,
    map: HashMap<(Prep, bool), f64>,
}

impl<'a> PrepCache<'a> {
    pub fn new(lab: &'a VirtualLab, seed: &SeedTree) -> Self {
        Self { lab, detunings: lab.detunings(seed), map: HashMap::new() }
    }

    pub fn get(&mut self, prep: &Prep, after_laser: bool) -> f64 {
        if let Some(v) = self.map.get(&(prep.clone(), after_laser)) {
            return *v;
        }
        let v = self.lab.prep_population(prep, after_laser, &self.detunings);
        self.map.insert((prep.clone(), after_laser), v);
        v
    }
}

/// Detected photon rate during one readout laser pulse.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PulseRate {
    pub pulse: LaserPulse,
    pub bright: f64,
    pub contrast: f64,
    pub p1: f64,
    pub tau: f64,
}

impl RateSource for PulseRate {
    fn duration(&self) -> f64 {
        self.pulse.duration
    }
    fn rate_at(&self, t: f64) -> f64 {
        if t < 0.0 || t >= self.pulse.duration {
            return 0.0;
        }
        let g = self.pulse.power_at(t) / self.pulse.set_power;
        self.bright * g * (1.0 - self.contrast * self.p1 * (-t / self.tau).exp())
    }
    fn max_rate(&self) -> f64 {
        self.bright * self.pulse.drift * (1.0 + self.pulse.lead.max(0.0))
    }
}

/// Zero signal for a dark interval (only dark counts).
pub(crate) struct Dark(pub f64);

impl RateSource for Dark {
    fn duration(&self) -> f64 {
        self.0
    }
    fn rate_at(&self, _: f64) -> f64 {
        0.0
    }
    fn max_rate(&self) -> f64 {
        0.0
    }
    fn integral(&self, _: f64, _: f64) -> f64 {
        0.0
    }
}

/// Whole-series rate: pulses at offsets within `[0, duration)`.
pub(crate) struct SeriesRate {
    pub duration: f64,
    pub pulses: Vec<(f64, PulseRate)>,
}

impl SeriesRate {
    fn find(&self, t: f64) -> Option<&(f64, PulseRate)> {
        let i = self.pulses.partition_point(|(o, _)| *o <= t);
        self.pulses[..i].last().filter(|(o, p)| t < o + p.pulse.duration)
    }
}

impl RateSource for SeriesRate {
    fn duration(&self) -> f64 {
        self.duration
    }
    fn rate_at(&self, t: f64) -> f64 {
        self.find(t).map_or(0.0, |(o, p)| p.rate_at(t - o))
    }
    fn max_rate(&self) -> f64 {
        self.pulses.iter().map(|(_, p)| p.max_rate()).fold(0.0, f64::max)
    }
    fn integral(&self, a: f64, b: f64) -> f64 {
        self.pulses
            .iter()
            .filter(|(o, p)| *o < b && o + p.pulse.duration > a)
            .map(|(o, p)| {
                let lo = (a - o).max(0.0);
                let hi = (b - o).min(p.pulse.duration);
                p.integral(lo, hi)
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab() -> VirtualLab {
        let mut cfg = LabConfig::default();
        cfg.spin.t2_star = f64::INFINITY;
        cfg.spin.t2 = f64::INFINITY;
        cfg.spin.t1 = f64::INFINITY;
        cfg.spin.shelf_fraction = 0.0;
        cfg.field.vector_mt = [0.0; 3];
        cfg.mw.frequency_hz = cfg.spin.d_zfs;
        VirtualLab::new(cfg)
    }

    #[test]
    fn pi_pulse_inverts_resonant_ensemble() {
        let l = lab();
        let pi_ns = (0.5 / l.rabi_hz() * 1e9).round() as u64;
        let prep: Prep = vec![(false, 0, 1000), (true, 0f64.to_bits(), pi_ns)];
        let p1 = l.prep_population(&prep, true, &[0.0]);
        assert!((p1 - 1.0).abs() < 1e-9, "{p1}");
        assert_eq!(l.prep_population(&vec![(false, 0, 1000)], true, &[0.0]), 0.0);
    }

    #[test]
    fn thermal_start_is_mixed() {
        let l = lab();
        assert!((l.prep_population(&vec![], false, &[0.0]) - 0.5).abs() < 1e-12);
    }
}
