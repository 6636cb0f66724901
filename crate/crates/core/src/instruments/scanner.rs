use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Instrument;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScannerError {
    #[error("axis {axis} position {value} um is outside the scanner range [{lo}, {hi}]")]
    Range { axis: char, value: f64, lo: f64, hi: f64 },
    #[error("axis {axis} needs at least one point")]
    Points { axis: char },
    #[error("sync frequency must be positive")]
    Sync,
}

/// Piezo stage travel (um) and the control voltage span mapped onto it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScannerConfig {
    pub range_um: [[f64; 2]; 3],
    pub voltage: [f64; 2],
}

impl Default for ScannerConfig {
    fn default() -> Self {
        Self { range_um: [[-50.0, 50.0], [-50.0, 50.0], [-25.0, 25.0]], voltage: [-10.0, 10.0] }
    }
}

impl ScannerConfig {
    pub fn check(&self, axis: usize, value: f64) -> Result<(), ScannerError> {
        let [lo, hi] = self.range_um[axis];
        if value < lo - 1e-9 || value > hi + 1e-9 {
            return Err(ScannerError::Range { axis: AXES[axis], value, lo, hi });
        }
        Ok(())
    }

    pub fn volts(&self, axis: usize, value: f64) -> f64 {
        let [lo, hi] = self.range_um[axis];
        let [vlo, vhi] = self.voltage;
        vlo + (value - lo) / (hi - lo) * (vhi - vlo)
    }
}

impl Instrument for ScannerConfig {
    fn name(&self) -> &'static str {
        "scanner"
    }
    fn dummy_info(&self) -> String {
        format!("virtual 3-axis piezo scanner: ranges {:?} um, drive {:?} V", self.range_um, self.voltage)
    }
}

const AXES: [char; 3] = ['x', 'y', 'z'];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisPlan {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

impl AxisPlan {
    pub fn fixed(v: f64) -> Self {
        Self { start: v, stop: v, points: 1 }
    }

    pub fn value(&self, k: usize) -> f64 {
        if self.points <= 1 {
            self.start
        } else {
            self.start + (self.stop - self.start) * k as f64 / (self.points - 1) as f64
        }
    }

    pub fn step(&self) -> f64 {
        if self.points <= 1 { 0.0 } else { (self.stop - self.start) / (self.points - 1) as f64 }
    }
}

/// Raster over x (fastest), then y, then z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub x: AxisPlan,
    pub y: AxisPlan,
    pub z: AxisPlan,
}

impl ScanPlan {
    pub fn axes(&self) -> [AxisPlan; 3] {
        [self.x, self.y, self.z]
    }

    pub fn pixels(&self) -> usize {
        self.x.points * self.y.points * self.z.points
    }

    /// Position of the `k`-th sync period in row-major order.
    pub fn position(&self, k: usize) -> [f64; 3] {
        let ix = k % self.x.points;
        let iy = (k / self.x.points) % self.y.points;
        let iz = k / (self.x.points * self.y.points);
        [self.x.value(ix), self.y.value(iy), self.z.value(iz)]
    }

    pub fn check(&self, cfg: &ScannerConfig) -> Result<(), ScannerError> {
        for (i, a) in self.axes().iter().enumerate() {
            if a.points == 0 {
                return Err(ScannerError::Points { axis: AXES[i] });
            }
            cfg.check(i, a.start)?;
            cfg.check(i, a.stop)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanWaveforms {
    pub volts: [Vec<f64>; 3],
    pub positions: Vec<[f64; 3]>,
    /// Start time (s) of each sync period.
    pub sync_edges: Vec<f64>,
}

/// Step-ramp drive voltages with one sync period per pixel.
pub fn scanner_waveforms(plan: &ScanPlan, cfg: &ScannerConfig, f_sync: f64) -> Result<ScanWaveforms, ScannerError> {
    if !(f_sync > 0.0) {
        return Err(ScannerError::Sync);
    }
    plan.check(cfg)?;
    let n = plan.pixels();
    let positions: Vec<[f64; 3]> = (0..n).map(|k| plan.position(k)).collect();
    let volts = [0, 1, 2].map(|a| positions.iter().map(|p| cfg.volts(a, p[a])).collect());
    let sync_edges = (0..n).map(|k| k as f64 / f_sync).collect();
    Ok(ScanWaveforms { volts, positions, sync_edges })
}
