//! NV-ensemble spin physics.
//!
//! Each (orientation, transition) pair is treated as a two-level system in the
//! rotating frame of the microwave drive. The third spin level only enters
//! through optical readout/repolarization and the metastable singlet shelf.
//! Bloch convention: `w = +1` is `|m_s = 0>`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::rng::SeedTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpinError {
    #[error("bias field {field_t} T gives gamma*|B| = {zeeman_hz} Hz, beyond the secular limit {limit_hz} Hz")]
    SecularGuard { field_t: f64, zeeman_hz: f64, limit_hz: f64 },
    #[error("invalid spin parameter: {0}")]
    Params(String),
    #[error("{0}")]
    Argument(String),
}

const INV_SQRT3: f64 = 0.577_350_269_189_625_8;

/// The four <111> bond directions of the diamond lattice.
pub const NV_AXES: [[f64; 3]; 4] = [
    [INV_SQRT3, INV_SQRT3, INV_SQRT3],
    [INV_SQRT3, -INV_SQRT3, -INV_SQRT3],
    [-INV_SQRT3, INV_SQRT3, -INV_SQRT3],
    [-INV_SQRT3, -INV_SQRT3, INV_SQRT3],
];

/// All spin-physics constants of the simulated ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NvEnsembleParams {
    /// Zero-field splitting D (Hz).
    pub d_zfs: f64,
    /// Strain splitting E (Hz).
    pub e_strain: f64,
    /// Gyromagnetic ratio (Hz/T).
    pub gamma: f64,
    pub t1: f64,
    pub t2: f64,
    pub t2_star: f64,
    /// Single-center spin readout contrast C.
    pub readout_contrast: f64,
    /// Optical polarization time at the saturation pump rate (s).
    pub tau_pol: f64,
    /// Metastable singlet lifetime (s).
    pub tau_singlet: f64,
    /// Saturated photoluminescence rate per center (1/s).
    pub r_sat: f64,
    pub n_centers: f64,
    /// Fraction of emitted photons reaching the detector.
    pub collection_efficiency: f64,
    /// Singlet population left behind by a laser pulse.
    pub shelf_fraction: f64,
    /// Equilibrium Bloch `w` reached through longitudinal relaxation.
    pub w_thermal: f64,
    /// Pump rate at which emission reaches half of `r_sat` (1/s).
    pub pump_saturation_rate: f64,
    /// Maximum CW contrast of one fully addressed orientation.
    pub cw_contrast_max: f64,
    /// Pump rate of maximum CW contrast (1/s).
    pub cw_optimal_pump_rate: f64,
    /// Fraction of D/2 that gamma*|B| may reach.
    pub secular_guard: f64,
    pub orientations: [[f64; 3]; 4],
}

impl Default for NvEnsembleParams {
    fn default() -> Self {
        Self {
            d_zfs: 2.87e9,
            e_strain: 0.0,
            gamma: 28e9,
            t1: 3e-3,
            t2: 30e-6,
            t2_star: 1e-6,
            readout_contrast: 0.3,
            tau_pol: 300e-9,
            tau_singlet: 300e-9,
            r_sat: 4e6,
            n_centers: 50.0,
            collection_efficiency: 0.05,
            shelf_fraction: 0.3,
            w_thermal: 0.0,
            pump_saturation_rate: 1.0 / 300e-9,
            cw_contrast_max: 0.16,
            cw_optimal_pump_rate: 1.0 / 300e-9,
            secular_guard: 1.0,
            orientations: NV_AXES,
        }
    }
}

impl NvEnsembleParams {
    pub fn validate(&self) -> Result<(), SpinError> {
        let err = |m: String| Err(SpinError::Params(m));
        let positive = [
            ("d_zfs", self.d_zfs),
            ("gamma", self.gamma),
            ("t1", self.t1),
            ("t2", self.t2),
            ("t2_star", self.t2_star),
            ("tau_singlet", self.tau_singlet),
            ("r_sat", self.r_sat),
            ("n_centers", self.n_centers),
            ("pump_saturation_rate", self.pump_saturation_rate),
            ("cw_optimal_pump_rate", self.cw_optimal_pump_rate),
            ("secular_guard", self.secular_guard),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return err(format!("{name} must be positive (got {v})"));
            }
        }
        if self.t2 > 2.0 * self.t1 {
            return err(format!("t2 = {} exceeds 2*t1 = {}", self.t2, 2.0 * self.t1));
        }
        if self.t2_star > self.t2 {
            return err(format!("t2_star = {} exceeds t2 = {}", self.t2_star, self.t2));
        }
        if !(self.readout_contrast > 0.0 && self.readout_contrast < 1.0) {
            return err(format!("readout_contrast must lie in (0, 1) (got {})", self.readout_contrast));
        }
        if !(100e-9..=1e-6).contains(&self.tau_pol) {
            return err(format!("tau_pol = {} s outside [100 ns, 1 us]", self.tau_pol));
        }
        for (name, v) in [
            ("collection_efficiency", self.collection_efficiency),
            ("shelf_fraction", self.shelf_fraction),
            ("cw_contrast_max", self.cw_contrast_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must lie in [0, 1] (got {v})"));
            }
        }
        if !(-1.0..=1.0).contains(&self.w_thermal) {
            return err(format!("w_thermal must lie in [-1, 1] (got {})", self.w_thermal));
        }
        for (i, a) in self.orientations.iter().enumerate() {
            if (dot(a, a) - 1.0).abs() > 1e-9 {
                return err(format!("orientation {i} is not a unit vector"));
            }
            for b in &self.orientations[i + 1..] {
                if (dot(a, b).abs() - 1.0 / 3.0).abs() > 1e-9 {
                    return err("orientations must be pairwise at |cos| = 1/3".into());
                }
            }
        }
        Ok(())
    }

    /// Steady-state detected rate of the whole ensemble at pump rate `pump_rate`
    /// with every spin in `|0>`.
    pub fn bright_rate(&self, pump_rate: f64) -> f64 {
        let x = pump_rate / self.pump_saturation_rate;
        self.n_centers * self.r_sat * self.collection_efficiency * x / (1.0 + x)
    }

    /// Repolarization time constant at `pump_rate`.
    pub fn tau_pol_at(&self, pump_rate: f64) -> f64 {
        self.tau_pol * self.pump_saturation_rate / pump_rate
    }

    /// Lorentzian HWHM (Hz) of the static inhomogeneous detuning distribution.
    pub fn inhomogeneous_hwhm(&self) -> f64 {
        1.0 / (2.0 * PI * self.t2_star)
    }

    pub fn relaxation(&self) -> Relaxation {
        Relaxation {
            t1: self.t1,
            t2: self.t2,
            w_eq: self.w_thermal,
            tau_singlet: self.tau_singlet,
        }
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Uniform bias magnetic field (T).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct BiasField {
    pub vector: [f64; 3],
}

impl BiasField {
    pub fn magnitude(&self) -> f64 {
        dot(&self.vector, &self.vector).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transition {
    Minus,
    Plus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceLine {
    pub frequency: f64,
    pub orientation_index: usize,
    pub transition: Transition,
    /// Fraction of all (orientation, transition) pairs on this line.
    pub weight: f64,
    /// Number of merged (orientation, transition) pairs.
    pub multiplicity: usize,
}

/// Lines closer than this are reported as one.
const MERGE_TOLERANCE_HZ: f64 = 1.0;

/// Resonance lines of the ensemble under `field`, ascending in frequency.
pub fn resonance_frequencies(
    params: &NvEnsembleParams,
    field: &BiasField,
) -> Result<Vec<ResonanceLine>, SpinError> {
    let zeeman = params.gamma * field.magnitude();
    let limit = params.secular_guard * params.d_zfs / 2.0;
    if zeeman >= limit {
        return Err(SpinError::SecularGuard {
            field_t: field.magnitude(),
            zeeman_hz: zeeman,
            limit_hz: limit,
        });
    }
    let mut raw = Vec::with_capacity(8);
    for (i, axis) in params.orientations.iter().enumerate() {
        let proj = params.gamma * dot(&field.vector, axis).abs();
        let split = (params.e_strain * params.e_strain + proj * proj).sqrt();
        raw.push((params.d_zfs - split, i, Transition::Minus));
        raw.push((params.d_zfs + split, i, Transition::Plus));
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut lines: Vec<ResonanceLine> = Vec::new();
    for (f, i, t) in raw {
        match lines.last_mut() {
            Some(last) if (f - last.frequency).abs() < MERGE_TOLERANCE_HZ => {
                last.weight += 0.125;
                last.multiplicity += 1;
            }
            _ => lines.push(ResonanceLine {
                frequency: f,
                orientation_index: i,
                transition: t,
                weight: 0.125,
                multiplicity: 1,
            }),
        }
    }
    Ok(lines)
}

/// Resonance frequency of one orientation's transition nearest to `mw_frequency`.
pub fn nearest_transition(
    params: &NvEnsembleParams,
    field: &BiasField,
    orientation: usize,
    mw_frequency: f64,
) -> f64 {
    let proj = params.gamma * dot(&field.vector, &params.orientations[orientation]).abs();
    let split = (params.e_strain * params.e_strain + proj * proj).sqrt();
    let (lo, hi) = (params.d_zfs - split, params.d_zfs + split);
    if (mw_frequency - lo).abs() <= (mw_frequency - hi).abs() {
        lo
    } else {
        hi
    }
}

/// Width and depth of one CW line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwLineShape {
    pub saturation: f64,
    pub fwhm: f64,
    /// Fractional PL dip if every center were resonant with the drive.
    pub full_depth: f64,
}

/// Rise-then-fall dependence of CW contrast on pump rate, peaking at 1.
pub fn laser_factor(pump_rate: f64, optimal_rate: f64) -> f64 {
    let x = pump_rate / optimal_rate;
    2.0 * x / (1.0 + x * x)
}

/// Power-broadened line shape for drive `rabi_frequency` (Hz) and `pump_rate` (1/s).
pub fn cw_line_shape(params: &NvEnsembleParams, rabi_frequency: f64, pump_rate: f64) -> CwLineShape {
    let gamma_p = 1.0 / (PI * params.t2_star);
    let gamma_c = pump_rate;
    let s = rabi_frequency * rabi_frequency / (gamma_p * gamma_c);
    CwLineShape {
        saturation: s,
        fwhm: gamma_p * (1.0 + s).sqrt(),
        full_depth: params.cw_contrast_max * s / (1.0 + s)
            * laser_factor(pump_rate, params.cw_optimal_pump_rate),
    }
}

/// Fractional PL reduction at each frequency of `grid`.
pub fn cw_spectrum(
    params: &NvEnsembleParams,
    field: &BiasField,
    rabi_frequency: f64,
    pump_rate: f64,
    grid: &[f64],
) -> Result<Vec<f64>, SpinError> {
    if grid.is_empty() {
        return Err(SpinError::Argument("empty frequency grid".into()));
    }
    if !(rabi_frequency >= 0.0) || !(pump_rate > 0.0) {
        return Err(SpinError::Argument(format!(
            "need rabi_frequency >= 0 and pump_rate > 0 (got {rabi_frequency}, {pump_rate})"
        )));
    }
    let lines = resonance_frequencies(params, field)?;
    let shape = cw_line_shape(params, rabi_frequency, pump_rate);
    let hw = shape.fwhm / 2.0;
    Ok(grid
        .iter()
        .map(|&f| {
            lines
                .iter()
                .map(|l| {
                    // a weight-1/8 line is one orientation, i.e. a quarter of the centers
                    let depth = shape.full_depth * (2.0 * l.weight).min(1.0);
                    let d = f - l.frequency;
                    depth * hw * hw / (d * d + hw * hw)
                })
                .sum()
        })
        .collect())
}

/// Bloch vector in the rotating frame of the addressed transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bloch {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl Bloch {
    pub const GROUND: Bloch = Bloch { u: 0.0, v: 0.0, w: 1.0 };

    pub fn norm(&self) -> f64 {
        (self.u * self.u + self.v * self.v + self.w * self.w).sqrt()
    }
}

/// One spin packet: triplet Bloch vector plus metastable shelf population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinState {
    pub bloch: Bloch,
    pub shelf: f64,
}

impl SpinState {
    pub const POLARIZED: SpinState = SpinState { bloch: Bloch::GROUND, shelf: 0.0 };

    /// Population of the bright-reducing `|1>` level.
    pub fn p1(&self) -> f64 {
        (1.0 - self.shelf) * (1.0 - self.bloch.w) / 2.0
    }
}

/// Relaxation constants. Infinite values disable the corresponding process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Relaxation {
    pub t1: f64,
    pub t2: f64,
    pub w_eq: f64,
    pub tau_singlet: f64,
}

impl Relaxation {
    pub const NONE: Relaxation =
        Relaxation { t1: f64::INFINITY, t2: f64::INFINITY, w_eq: 0.0, tau_singlet: f64::INFINITY };

    fn decay(&self, mut s: SpinState, t: f64) -> SpinState {
        if s.shelf > 0.0 {
            let remaining = s.shelf * (-t / self.tau_singlet).exp();
            let triplet = 1.0 - remaining;
            if triplet > 1e-15 {
                let returned = s.shelf - remaining;
                let keep = 1.0 - s.shelf;
                s.bloch.u = s.bloch.u * keep / triplet;
                s.bloch.v = s.bloch.v * keep / triplet;
                s.bloch.w = (s.bloch.w * keep + returned) / triplet;
            }
            s.shelf = remaining;
        }
        let e2 = (-t / self.t2).exp();
        let e1 = (-t / self.t1).exp();
        s.bloch.u *= e2;
        s.bloch.v *= e2;
        s.bloch.w = self.w_eq + (s.bloch.w - self.w_eq) * e1;
        s
    }
}

fn rotate(b: Bloch, n: [f64; 3], angle: f64) -> Bloch {
    let (s, c) = angle.sin_cos();
    let r = [b.u, b.v, b.w];
    let cross = [n[1] * r[2] - n[2] * r[1], n[2] * r[0] - n[0] * r[2], n[0] * r[1] - n[1] * r[0]];
    let nd = dot(&n, &r) * (1.0 - c);
    Bloch {
        u: r[0] * c + cross[0] * s + n[0] * nd,
        v: r[1] * c + cross[1] * s + n[1] * nd,
        w: r[2] * c + cross[2] * s + n[2] * nd,
    }
}

/// Square microwave pulse of angular Rabi frequency `rabi` (rad/s), detuning
/// `detuning` (Hz), length `duration` (s) and phase `phase` (rad).
pub fn apply_mw_pulse(
    state: SpinState,
    relax: &Relaxation,
    rabi: f64,
    detuning: f64,
    duration: f64,
    phase: f64,
) -> SpinState {
    if duration <= 0.0 {
        return state;
    }
    let delta = 2.0 * PI * detuning;
    let eff = (rabi * rabi + delta * delta).sqrt();
    let mut s = state;
    if eff > 0.0 {
        let (sp, cp) = phase.sin_cos();
        let n = [rabi * cp / eff, rabi * sp / eff, delta / eff];
        s.bloch = rotate(s.bloch, n, eff * duration);
    }
    relax.decay(s, duration)
}

/// Free evolution for `duration` at detuning `detuning` (Hz).
pub fn propagate_free(state: SpinState, relax: &Relaxation, duration: f64, detuning: f64) -> SpinState {
    if duration <= 0.0 {
        return state;
    }
    let mut s = state;
    s.bloch = rotate(s.bloch, [0.0, 0.0, 1.0], 2.0 * PI * detuning * duration);
    relax.decay(s, duration)
}

/// Static detunings (Hz) drawn from the Lorentzian whose ensemble-averaged
/// free-induction envelope is `exp(-t / t2_star)`. Draws are stratified over
/// the quantiles, one per stratum.
pub fn sample_detunings(params: &NvEnsembleParams, count: usize, seed: u64) -> Vec<f64> {
    let hwhm = params.inhomogeneous_hwhm();
    if !(hwhm > 0.0) || !hwhm.is_finite() {
        return vec![0.0; count];
    }
    let mut rng = SeedTree::new(seed).stream(&[0x5D]);
    (0..count)
        .map(|i| {
            let u = (i as f64 + rng.random::<f64>()) / count as f64;
            let u = u.clamp(1e-12, 1.0 - 1e-12);
            hwhm * (PI * (u - 0.5)).tan()
        })
        .collect()
}

/// Sampled photoluminescence rate (1/s) at the centre of each `dt` bin.
#[derive(Debug, Clone, PartialEq)]
pub struct PlTrace {
    pub dt: f64,
    pub rates: Vec<f64>,
}

/// Optical readout of a spin packet under constant pump rate. Returns the PL
/// trace and the repolarized state left behind by the pulse.
pub fn readout_and_repolarize(
    params: &NvEnsembleParams,
    state: SpinState,
    pump_rate: f64,
    duration: f64,
    dt: f64,
) -> Result<(PlTrace, SpinState), SpinError> {
    if !(dt > 0.0) || duration < dt {
        return Err(SpinError::Argument(format!("need dt > 0 and duration >= dt (dt={dt}, duration={duration})")));
    }
    let bright = params.bright_rate(pump_rate);
    let tau = params.tau_pol_at(pump_rate);
    let p1 = state.p1();
    let n = (duration / dt).round() as usize;
    let rates = (0..n)
        .map(|k| {
            let t = (k as f64 + 0.5) * dt;
            bright * (1.0 - params.readout_contrast * p1 * (-t / tau).exp())
        })
        .collect();
    let after = SpinState { bloch: Bloch::GROUND, shelf: params.shelf_fraction };
    Ok((PlTrace { dt, rates }, after))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_relax() -> Relaxation {
        Relaxation::NONE
    }

    #[test]
    fn zero_field_single_line() {
        let p = NvEnsembleParams::default();
        let lines = resonance_frequencies(&p, &BiasField::default()).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].frequency, 2.87e9);
        assert!((lines[0].weight - 1.0).abs() < 1e-15);
    }

    #[test]
    fn axial_field_four_lines() {
        let p = NvEnsembleParams::default();
        let b = 1e-3;
        let field = BiasField { vector: [b * INV_SQRT3, b * INV_SQRT3, b * INV_SQRT3] };
        let lines = resonance_frequencies(&p, &field).unwrap();
        let f: Vec<f64> = lines.iter().map(|l| l.frequency).collect();
        let expect = [2.842e9, 2.87e9 - 28e6 / 3.0, 2.87e9 + 28e6 / 3.0, 2.898e9];
        assert_eq!(f.len(), 4);
        for (a, e) in f.iter().zip(expect) {
            assert!((a - e).abs() < 1.0, "{a} vs {e}");
        }
        let w: Vec<f64> = lines.iter().map(|l| l.weight).collect();
        assert_eq!(w, vec![0.125, 0.375, 0.375, 0.125]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn generic_field_eight_lines() {
        let p = NvEnsembleParams::default();
        let field = BiasField { vector: [0.8e-3, 0.5e-3, 0.33e-3] };
        let lines = resonance_frequencies(&p, &field).unwrap();
        assert_eq!(lines.len(), 8);
        assert!(lines.windows(2).all(|w| w[0].frequency < w[1].frequency));
    }

    #[test]
    fn secular_guard() {
        let p = NvEnsembleParams::default();
        let field = BiasField { vector: [0.06, 0.0, 0.0] };
        assert!(matches!(resonance_frequencies(&p, &field), Err(SpinError::SecularGuard { .. })));
    }

    #[test]
    fn pi_pulse_flips() {
        let rabi = 2.0 * PI * 5e6;
        let s = apply_mw_pulse(SpinState::POLARIZED, &no_relax(), rabi, 0.0, 100e-9, 0.0);
        assert!((s.bloch.w + 1.0).abs() <= 1e-6);
    }

    #[test]
    fn zero_duration_is_identity() {
        let s0 = SpinState { bloch: Bloch { u: 0.3, v: -0.2, w: 0.5 }, shelf: 0.1 };
        let r = NvEnsembleParams::default().relaxation();
        assert_eq!(apply_mw_pulse(s0, &r, 1e7, 1e6, 0.0, 0.3), s0);
        assert_eq!(propagate_free(s0, &r, 0.0, 1e6), s0);
    }

    #[test]
    fn two_half_pulses_make_a_pi_pulse() {
        let rabi = 2.0 * PI * 5e6;
        let half = apply_mw_pulse(SpinState::POLARIZED, &no_relax(), rabi, 0.0, 50e-9, 0.4);
        let two = apply_mw_pulse(half, &no_relax(), rabi, 0.0, 50e-9, 0.4);
        let one = apply_mw_pulse(SpinState::POLARIZED, &no_relax(), rabi, 0.0, 100e-9, 0.4);
        assert!((two.bloch.u - one.bloch.u).abs() < 1e-12);
        assert!((two.bloch.v - one.bloch.v).abs() < 1e-12);
        assert!((two.bloch.w - one.bloch.w).abs() < 1e-12);
    }

    #[test]
    fn free_precession_phase() {
        let s = SpinState { bloch: Bloch { u: 0.0, v: 1.0, w: 0.0 }, shelf: 0.0 };
        let out = propagate_free(s, &no_relax(), 250e-9, 2e6);
        assert!((out.bloch.v + 1.0).abs() < 1e-12);
        assert!(out.bloch.u.abs() < 1e-12);
    }

    #[test]
    fn long_times_equilibrate() {
        let p = NvEnsembleParams::default();
        let s = SpinState { bloch: Bloch { u: 0.5, v: 0.5, w: -0.7 }, shelf: 0.2 };
        let out = propagate_free(s, &p.relaxation(), 1.0, 1e3);
        assert!((out.bloch.w - p.w_thermal).abs() < 1e-12);
        assert!(out.bloch.u.abs() < 1e-12 && out.bloch.v.abs() < 1e-12);
        assert!(out.shelf < 1e-12);
    }

    #[test]
    fn infinite_t2_star_gives_zero_detunings() {
        let p = NvEnsembleParams { t2_star: f64::INFINITY, ..Default::default() };
        assert!(sample_detunings(&p, 16, 3).iter().all(|&d| d == 0.0));
        let q = NvEnsembleParams::default();
        assert_eq!(sample_detunings(&q, 64, 9), sample_detunings(&q, 64, 9));
    }

    #[test]
    fn zero_contrast_flat_readout() {
        let p = NvEnsembleParams { readout_contrast: 1e-300, ..Default::default() };
        let s = SpinState { bloch: Bloch { u: 0.0, v: 0.0, w: -1.0 }, shelf: 0.0 };
        let (tr, _) = readout_and_repolarize(&p, s, 3e6, 1e-6, 1e-9).unwrap();
        let first = tr.rates[0];
        assert!(tr.rates.iter().all(|r| (r - first).abs() <= 1e-9 * first));
    }

    #[test]
    fn readout_distinguishes_spin_states() {
        let p = NvEnsembleParams::default();
        let rate = p.pump_saturation_rate;
        let dark = SpinState { bloch: Bloch { u: 0.0, v: 0.0, w: -1.0 }, shelf: 0.0 };
        let (a, after) = readout_and_repolarize(&p, SpinState::POLARIZED, rate, 5e-6, 1e-9).unwrap();
        let (b, _) = readout_and_repolarize(&p, dark, rate, 5e-6, 1e-9).unwrap();
        let ratio0 = b.rates[0] / a.rates[0];
        assert!((ratio0 - (1.0 - p.readout_contrast)).abs() < 2e-3);
        let end = a.rates.len() - 1;
        assert!((b.rates[end] / a.rates[end] - 1.0).abs() < 1e-6);
        assert_eq!(after.bloch, Bloch::GROUND);
        assert_eq!(after.shelf, p.shelf_fraction);
    }

    #[test]
    fn params_validation() {
        assert!(NvEnsembleParams::default().validate().is_ok());
        let bad = NvEnsembleParams { t2: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = NvEnsembleParams { t2_star: 1e-3, ..Default::default() };
        assert!(bad.validate().is_err());
        let mut bad = NvEnsembleParams::default();
        bad.orientations[1] = [1.0, 0.0, 0.0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_line_contrast_near_two_percent() {
        let p = NvEnsembleParams::default();
        let field = BiasField { vector: [0.8e-3, 0.5e-3, 0.33e-3] };
        let lines = resonance_frequencies(&p, &field).unwrap();
        // drive at s = 1 with the pump at its CW optimum
        let gp = 1.0 / (PI * p.t2_star);
        let rabi = (gp * p.cw_optimal_pump_rate).sqrt();
        let c = cw_spectrum(&p, &field, rabi, p.cw_optimal_pump_rate, &[lines[0].frequency]).unwrap()[0];
        assert!((c - 0.02).abs() < 2e-3, "{c}");
    }
}
