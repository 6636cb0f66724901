use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::lab::VirtualLab;
use super::{EngineError, Hooks, Partial, RunConfig};
use crate::instruments::detector::DetectorKind;
use crate::instruments::laser::LaserDriver;
use crate::instruments::{mw_step, TimingViolation};
use crate::rng::SeedTree;
use crate::spin::cw_spectrum;

const K_ORDER: u64 = 1;
const K_NOISE: u64 = 2;
const K_LASER: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrder {
    Up,
    Down,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwRequest {
    pub run: RunConfig,
    /// Ascending MW frequencies (Hz).
    pub grid: Vec<f64>,
    /// Integration time per point (s).
    pub dwell: f64,
    pub mw_on: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwResult {
    pub freqs: Vec<f64>,
    /// Mean detector signal per point.
    pub pl: Vec<f64>,
    pub contrast: Vec<f64>,
    pub reference: f64,
    pub sweeps_done: u32,
    pub violations: Vec<TimingViolation>,
    pub partial: bool,
    pub duration: f64,
}

/// Off-resonance level: mean of the outer 2% of points on each side.
pub fn edge_reference(pl: &[f64]) -> f64 {
    let n = pl.len();
    let k = ((0.02 * n as f64).ceil() as usize).clamp(1, n.div_ceil(2));
    let s: f64 = pl[..k].iter().chain(&pl[n - k..]).sum();
    s / (2 * k) as f64
}

fn contrast_of(sums: &[f64], sweeps: u32) -> (Vec<f64>, Vec<f64>, f64) {
    let pl: Vec<f64> = sums.iter().map(|s| s / sweeps.max(1) as f64).collect();
    let r = edge_reference(&pl);
    let c = pl.iter().map(|v| if r != 0.0 { v / r } else { 0.0 }).collect();
    (pl, c, r)
}

/// CW-ODMR: step the MW source across `grid` and integrate PL at each point.
pub fn run_cw(lab: &mut VirtualLab, req: &CwRequest, hooks: &dyn Hooks) -> Result<CwResult, EngineError> {
    let run = &req.run;
    run.validate(&lab.cfg)?;
    let min = lab.cfg.mw.min_dwell_s;
    if req.dwell < min * (1.0 - 1e-9) {
        return Err(EngineError::Timing { dwell: req.dwell, min });
    }
    if req.grid.len() < 2 || req.grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EngineError::Config("CW grid needs at least two ascending frequencies".into()));
    }
    let det = lab.detector(&run.detector)?;
    let mut src = lab.mw_source();
    src.output_on = req.mw_on;
    let rabi = src.rabi_frequency();
    src.output_on = true;
    let pump = lab.pump_rate();
    let bright = lab.bright_rate();
    let tree = SeedTree::new(run.seed);
    let mut driver = LaserDriver::new(lab.cfg.laser, tree.stream(&[K_LASER]));
    let n = req.grid.len();
    let mut sums = vec![0.0; n];
    let mut violations = Vec::new();
    let mut t = 0.0;
    let mut aborted = false;
    let mut done = 0u32;
    let total = (run.repeats as usize * n) as f64;
    'sweeps: for sweep in 0..run.repeats {
        let mut order: Vec<usize> = (0..n).collect();
        match run.sweep_order {
            SweepOrder::Up => {}
            SweepOrder::Down => order.reverse(),
            SweepOrder::Random => order.shuffle(&mut tree.stream(&[K_ORDER, sweep as u64])),
        }
        src.configure_list(order.iter().map(|&i| req.grid[i]).collect())?;
        for (step, &i) in order.iter().enumerate() {
            let f = src.frequency();
            let dip = if rabi > 0.0 { cw_spectrum(&lab.cfg.spin, &lab.cfg.field.bias(), rabi, pump, &[f])?[0] } else { 0.0 };
            let pulse = driver.emit(lab.clock + t, req.dwell, f64::INFINITY);
            let g = pulse.mean_power() / pulse.set_power;
            let incident = bright * g * (1.0 - dip);
            let mut rng = tree.stream(&[K_NOISE, sweep as u64, step as u64]);
            let value = match det.config.kind {
                DetectorKind::DigitalPc => {
                    let mean = det.config.expected_count_rate(incident) * req.dwell;
                    if det.config.noiseless || mean <= 0.0 {
                        mean
                    } else {
                        Poisson::new(mean).map_err(|e| EngineError::Config(e.to_string()))?.sample(&mut rng)
                    }
                }
                DetectorKind::AnalogPd => {
                    let a = det.config.analog;
                    let v = a.responsivity * incident;
                    if det.config.noiseless {
                        v
                    } else {
                        let sigma = a.noise_density / (2.0 * req.dwell).sqrt();
                        v + Normal::new(0.0, sigma).map_err(|e| EngineError::Config(e.to_string()))?.sample(&mut rng)
                    }
                }
            };
            sums[i] += value;
            t += req.dwell;
            let (next, v) = mw_step(&src, t)?;
            src = next;
            violations.extend(v);
            let k = (sweep as usize * n + step + 1) as f64;
            if !hooks.checkpoint(k / total, Some(f), None, t) {
                aborted = true;
                break 'sweeps;
            }
        }
        done += 1;
        let (_, c, _) = contrast_of(&sums, done);
        hooks.partial(Partial::Spectrum { freqs: req.grid.clone(), contrast: c, sweep: done });
    }
    let (pl, contrast, reference) = contrast_of(&sums, done);
    lab.clock += t;
    Ok(CwResult {
        freqs: req.grid.clone(),
        pl,
        contrast,
        reference,
        sweeps_done: done,
        violations,
        partial: aborted,
        duration: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LabConfig;
    use crate::engine::NoHooks;

    fn req(order: SweepOrder, mw_on: bool) -> CwRequest {
        let grid: Vec<f64> = (0..201).map(|k| 2.85e9 + k as f64 * 0.2e6).collect();
        CwRequest { run: RunConfig { sweep_order: order, repeats: 2, ..Default::default() }, grid, dwell: 1e-3, mw_on }
    }

    #[test]
    fn dwell_below_minimum_rejected() {
        let mut lab = VirtualLab::new(LabConfig::default());
        let mut r = req(SweepOrder::Up, true);
        r.dwell = 1e-5;
        assert!(matches!(run_cw(&mut lab, &r, &NoHooks), Err(EngineError::Timing { .. })));
    }

    #[test]
    fn zero_power_is_flat() {
        let mut cfg = LabConfig::default();
        cfg.detectors.get_mut("apd").unwrap().noiseless = true;
        let mut lab = VirtualLab::new(cfg);
        let r = run_cw(&mut lab, &req(SweepOrder::Random, false), &NoHooks).unwrap();
        assert!(r.contrast.iter().all(|c| (c - 1.0).abs() < 1e-12));
        assert!(r.violations.is_empty());
    }

    #[test]
    fn noiseless_orders_agree() {
        let mut cfg = LabConfig::default();
        cfg.detectors.get_mut("apd").unwrap().noiseless = true;
        let a = run_cw(&mut VirtualLab::new(cfg.clone()), &req(SweepOrder::Up, true), &NoHooks).unwrap();
        let b = run_cw(&mut VirtualLab::new(cfg), &req(SweepOrder::Down, true), &NoHooks).unwrap();
        for (x, y) in a.contrast.iter().zip(&b.contrast) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.contrast.iter().cloned().fold(1.0, f64::min) < 0.99);
    }

    #[test]
    fn edge_reference_uses_both_ends() {
        let mut v = vec![0.0; 100];
        v[0] = 2.0;
        v[1] = 2.0;
        v[98] = 4.0;
        v[99] = 4.0;
        assert_eq!(edge_reference(&v), 3.0);
    }
}
