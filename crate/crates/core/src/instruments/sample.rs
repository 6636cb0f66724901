use serde::{Deserialize, Serialize};

use super::Instrument;
use crate::optics::OpticsReport;

/// FWHM to standard deviation of a Gaussian.
const FWHM_TO_SIGMA: f64 = 2.354;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Emitter {
    pub position_um: [f64; 3],
    pub n_centers: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VirtualSample {
    pub emitters: Vec<Emitter>,
    /// Stage drift velocity (um/s).
    pub stage_drift: [f64; 3],
}

impl Default for VirtualSample {
    fn default() -> Self {
        Self { emitters: vec![Emitter { position_um: [0.0; 3], n_centers: 50.0 }], stage_drift: [0.0; 3] }
    }
}

impl VirtualSample {
    pub fn position_at(&self, e: &Emitter, t: f64) -> [f64; 3] {
        [
            e.position_um[0] + self.stage_drift[0] * t,
            e.position_um[1] + self.stage_drift[1] * t,
            e.position_um[2] + self.stage_drift[2] * t,
        ]
    }

    /// Relative PSF overlap of each emitter with the focus, weighted by its center count.
    pub fn overlap(&self, focus_um: [f64; 3], optics: &OpticsReport, t: f64) -> f64 {
        let sl = optics.r_min.um() / FWHM_TO_SIGMA;
        let sz = optics.z_min.um() / FWHM_TO_SIGMA;
        self.emitters
            .iter()
            .map(|e| {
                let p = self.position_at(e, t);
                let dx = focus_um[0] - p[0];
                let dy = focus_um[1] - p[1];
                let dz = focus_um[2] - p[2];
                e.n_centers * (-(dx * dx + dy * dy) / (2.0 * sl * sl) - dz * dz / (2.0 * sz * sz)).exp()
            })
            .sum()
    }
}

impl Instrument for VirtualSample {
    fn name(&self) -> &'static str {
        "sample"
    }
    fn dummy_info(&self) -> String {
        format!("virtual diamond sample: {} emitter(s), drift {:?} um/s", self.emitters.len(), self.stage_drift)
    }
}

/// Photon rate collected with the focus at `focus_um`, given the detected rate of a single center.
pub fn confocal_rate(sample: &VirtualSample, focus_um: [f64; 3], optics: &OpticsReport, per_center_rate: f64, t: f64) -> f64 {
    per_center_rate * sample.overlap(focus_um, optics, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{report, ConfocalGeometry, Length, ObjectiveSpec};

    fn optics() -> OpticsReport {
        report(&ObjectiveSpec::default(), &ConfocalGeometry::default()).unwrap()
    }

    #[test]
    fn one_fwhm_offset_gives_sixteenth() {
        let o = optics();
        let s = VirtualSample { emitters: vec![Emitter { position_um: [0.0; 3], n_centers: 1.0 }], stage_drift: [0.0; 3] };
        let peak = confocal_rate(&s, [0.0; 3], &o, 1.0, 0.0);
        let off = confocal_rate(&s, [o.r_min.um(), 0.0, 0.0], &o, 1.0, 0.0);
        assert!((off / peak - 0.0625).abs() < 1e-3);
    }

    #[test]
    fn two_emitters_resolve() {
        let o = optics();
        let sep = 5.0 * o.r_min.um();
        let s = VirtualSample {
            emitters: vec![
                Emitter { position_um: [0.0; 3], n_centers: 1.0 },
                Emitter { position_um: [sep, 0.0, 0.0], n_centers: 1.0 },
            ],
            stage_drift: [0.0; 3],
        };
        let line: Vec<f64> = (0..=100).map(|k| confocal_rate(&s, [k as f64 * sep / 100.0 * 1.0, 0.0, 0.0], &o, 1.0, 0.0)).collect();
        let maxima = (1..100).filter(|&k| line[k] > line[k - 1] && line[k] >= line[k + 1]).count()
            + usize::from(line[0] > line[1])
            + usize::from(line[100] > line[99]);
        assert_eq!(maxima, 2);
        let _ = Length::from_um(1.0);
    }

    #[test]
    fn drift_moves_emitter() {
        let o = optics();
        let s = VirtualSample { emitters: vec![Emitter { position_um: [0.0; 3], n_centers: 1.0 }], stage_drift: [0.1, 0.0, 0.0] };
        let a = confocal_rate(&s, [1.0, 0.0, 0.0], &o, 1.0, 10.0);
        assert!((a - 1.0).abs() < 1e-12);
    }
}
