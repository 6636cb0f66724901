use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::lab::VirtualLab;
use super::{EngineError, Hooks, Partial, RunConfig};
use crate::instruments::detector::DetectorKind;
use crate::instruments::{confocal_rate, scanner_waveforms, ScanPlan};
use crate::rng::SeedTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRequest {
    pub run: RunConfig,
    pub plan: ScanPlan,
    /// Integration time per pixel (s).
    pub dwell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub plan: ScanPlan,
    /// Integrated signal per pixel, row-major with x fastest.
    pub image: Vec<f64>,
    /// Lab time at the first pixel (s).
    pub t_start: f64,
    pub partial: bool,
}

impl ScanResult {
    pub fn argmax(&self) -> Option<(usize, [f64; 3])> {
        let k = (0..self.image.len()).max_by(|&a, &b| self.image[a].total_cmp(&self.image[b]).then(b.cmp(&a)))?;
        Some((k, self.plan.position(k)))
    }
}

/// Confocal raster scan; one sync period per pixel.
pub fn run_scan(lab: &mut VirtualLab, req: &ScanRequest, hooks: &dyn Hooks) -> Result<ScanResult, EngineError> {
    req.run.validate(&lab.cfg)?;
    if !(req.dwell > 0.0) {
        return Err(EngineError::Config("pixel dwell must be positive".into()));
    }
    let wave = scanner_waveforms(&req.plan, &lab.cfg.scanner, 1.0 / req.dwell)?;
    let det = lab.detector(&req.run.detector)?;
    let optics = lab.optics()?;
    let p = &lab.cfg.spin;
    let per_center = p.bright_rate(lab.pump_rate()) / p.n_centers;
    let tree = SeedTree::new(req.run.seed);
    let row_len = req.plan.x.points;
    let t_start = lab.clock;
    let n = wave.positions.len();
    let mut image = Vec::with_capacity(n);
    let mut aborted = false;
    for (k, pos) in wave.positions.iter().enumerate() {
        let t = t_start + wave.sync_edges[k];
        let incident = confocal_rate(&lab.cfg.sample, *pos, &optics, per_center, t);
        let mut rng = tree.stream(&[k as u64]);
        let v = match det.config.kind {
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
                let sigma = if det.config.noiseless { 0.0 } else { a.noise_density / (2.0 * req.dwell).sqrt() };
                a.responsivity * incident + Normal::new(0.0, sigma).map_err(|e| EngineError::Config(e.to_string()))?.sample(&mut rng)
            }
        };
        image.push(v);
        if (k + 1) % row_len == 0 {
            let row = k / row_len;
            hooks.partial(Partial::ScanRow { row, values: image[row * row_len..].to_vec() });
        }
        if !hooks.checkpoint((k + 1) as f64 / n as f64, None, None, wave.sync_edges[k] + req.dwell) {
            aborted = true;
            break;
        }
    }
    lab.clock += image.len() as f64 * req.dwell;
    Ok(ScanResult { plan: req.plan, image, t_start, partial: aborted })
}
