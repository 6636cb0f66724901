use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Instrument;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("analog sampling interval {dt} s is too coarse for bandwidth {bandwidth} Hz")]
    Sampling { dt: f64, bandwidth: f64 },
    #[error("invalid detector parameters: {0}")]
    Params(String),
}

/// Photon rate arriving at the detector, as a function of time within a segment.
pub trait RateSource {
    fn duration(&self) -> f64;
    fn rate_at(&self, t: f64) -> f64;
    /// Upper bound on `rate_at` over the segment.
    fn max_rate(&self) -> f64;
    /// Expected number of photons in `[a, b)`.
    fn integral(&self, a: f64, b: f64) -> f64 {
        // about one sample per nanosecond
        let n = ((b - a) * 1e9).ceil().clamp(4.0, 64.0) as usize;
        let dt = (b - a) / n as f64;
        (0..n).map(|k| self.rate_at(a + (k as f64 + 0.5) * dt)).sum::<f64>() * dt
    }
}

/// Piecewise-constant sampled rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTrace {
    pub dt: f64,
    pub rates: Vec<f64>,
}

impl RateSource for RateTrace {
    fn duration(&self) -> f64 {
        self.dt * self.rates.len() as f64
    }
    fn rate_at(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        self.rates.get((t / self.dt) as usize).copied().unwrap_or(0.0)
    }
    fn max_rate(&self) -> f64 {
        self.rates.iter().copied().fold(0.0, f64::max)
    }
    fn integral(&self, a: f64, b: f64) -> f64 {
        let (a, b) = (a.max(0.0), b.min(self.duration()));
        if b <= a {
            return 0.0;
        }
        let i0 = (a / self.dt) as usize;
        let i1 = ((b / self.dt).ceil() as usize).min(self.rates.len());
        (i0..i1)
            .map(|i| {
                let lo = (i as f64 * self.dt).max(a);
                let hi = ((i + 1) as f64 * self.dt).min(b);
                self.rates[i] * (hi - lo).max(0.0)
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    AnalogPd,
    DigitalPc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalogParams {
    pub bandwidth: f64,
    /// Output noise density (V/sqrt(Hz)).
    pub noise_density: f64,
    /// Volts per photon/s.
    pub responsivity: f64,
}

impl Default for AnalogParams {
    fn default() -> Self {
        Self { bandwidth: 10e6, noise_density: 1e-9, responsivity: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DigitalParams {
    pub quantum_efficiency: f64,
    pub dark_rate: f64,
    pub dead_time: f64,
    pub saturation_rate: f64,
}

impl Default for DigitalParams {
    fn default() -> Self {
        Self { quantum_efficiency: 0.7, dark_rate: 100.0, dead_time: 22e-9, saturation_rate: 30e6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub analog: AnalogParams,
    pub digital: DigitalParams,
    /// Produce expected values instead of random realizations.
    pub noiseless: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kind: DetectorKind::DigitalPc,
            analog: AnalogParams::default(),
            digital: DigitalParams::default(),
            noiseless: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let d = &self.digital;
        let a = &self.analog;
        if !(0.0..=1.0).contains(&d.quantum_efficiency) || d.dark_rate < 0.0 || d.dead_time < 0.0 {
            return Err(DetectorError::Params("digital parameters out of range".into()));
        }
        if !(d.saturation_rate > 0.0) || !(a.bandwidth > 0.0) || a.noise_density < 0.0 {
            return Err(DetectorError::Params("rates and bandwidth must be positive".into()));
        }
        Ok(())
    }

    /// Effective non-paralyzable dead time.
    pub fn effective_dead_time(&self) -> f64 {
        self.digital.dead_time.max(1.0 / self.digital.saturation_rate)
    }

    /// Mean detected count rate for a steady incident rate.
    pub fn expected_count_rate(&self, incident: f64) -> f64 {
        let raw = self.digital.quantum_efficiency * incident + self.digital.dark_rate;
        raw / (1.0 + raw * self.effective_dead_time())
    }
}

/// Detected photon arrival times (s) relative to the segment start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonEvents {
    pub duration: f64,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogTrace {
    pub dt: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Detection {
    Photons(PhotonEvents),
    Analog(AnalogTrace),
    /// Expected counts per bin of width `dt` (noiseless digital detector).
    Expected { dt: f64, counts: Vec<f64> },
}

impl Detection {
    pub fn duration(&self) -> f64 {
        match self {
            Detection::Photons(p) => p.duration,
            Detection::Analog(a) => a.dt * a.values.len() as f64,
            Detection::Expected { dt, counts } => dt * counts.len() as f64,
        }
    }
}

/// Streaming detector; dead time and filter state persist across segments.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    last_event: f64,
    filter: f64,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self, DetectorError> {
        config.validate()?;
        Ok(Self { config, last_event: f64::NEG_INFINITY, filter: 0.0 })
    }

    /// Photon events for a segment starting at absolute time `t0`.
    pub fn photons<S: RateSource + ?Sized>(&mut self, src: &S, t0: f64, rng: &mut ChaCha8Rng) -> PhotonEvents {
        let d = self.config.digital;
        let dur = src.duration();
        let lmax = d.quantum_efficiency * src.max_rate() + d.dark_rate;
        let mut times = Vec::new();
        if lmax > 0.0 {
            let exp = Exp::new(lmax).expect("positive rate");
            let dead = self.config.effective_dead_time();
            let mut t = 0.0;
            loop {
                t += exp.sample(rng);
                if t >= dur {
                    break;
                }
                let lam = d.quantum_efficiency * src.rate_at(t) + d.dark_rate;
                if rng.random::<f64>() * lmax < lam && t0 + t - self.last_event >= dead {
                    self.last_event = t0 + t;
                    times.push(t);
                }
            }
        }
        PhotonEvents { duration: dur, times }
    }

    /// Expected detected counts in bins of `dt` (dead time applied as a rate correction).
    pub fn expected<S: RateSource + ?Sized>(&self, src: &S, dt: f64) -> Vec<f64> {
        let n = (src.duration() / dt + 1e-9).floor() as usize;
        (0..n)
            .map(|k| {
                let a = k as f64 * dt;
                let incident = src.integral(a, a + dt) / dt;
                self.config.expected_count_rate(incident) * dt
            })
            .collect()
    }

    /// Photodiode output sampled every `dt`.
    pub fn analog<S: RateSource + ?Sized>(
        &mut self,
        src: &S,
        dt: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<AnalogTrace, DetectorError> {
        let a = self.config.analog;
        if dt > 1.0 / (10.0 * a.bandwidth) * (1.0 + 1e-9) {
            return Err(DetectorError::Sampling { dt, bandwidth: a.bandwidth });
        }
        let tau = 1.0 / (2.0 * std::f64::consts::PI * a.bandwidth);
        let alpha = 1.0 - (-dt / tau).exp();
        let sigma = if self.config.noiseless { 0.0 } else { a.noise_density * a.bandwidth.sqrt() };
        let n = (src.duration() / dt + 1e-9).floor() as usize;
        let mut values = Vec::with_capacity(n);
        for k in 0..n {
            let x = a.responsivity * src.rate_at((k as f64 + 0.5) * dt);
            self.filter += alpha * (x - self.filter);
            let noise: f64 = if sigma > 0.0 { sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) } else { 0.0 };
            values.push(self.filter + noise);
        }
        Ok(AnalogTrace { dt, values })
    }

    /// Let the analog filter relax through a dark interval.
    pub fn advance_dark(&mut self, duration: f64) {
        let tau = 1.0 / (2.0 * std::f64::consts::PI * self.config.analog.bandwidth);
        self.filter *= (-duration / tau).exp();
    }
}

impl Instrument for Detector {
    fn name(&self) -> &'static str {
        "detector"
    }
    fn dummy_info(&self) -> String {
        match self.config.kind {
            DetectorKind::AnalogPd => format!(
                "virtual photodiode: bandwidth {:.3} MHz, noise {} V/rtHz",
                self.config.analog.bandwidth / 1e6,
                self.config.analog.noise_density
            ),
            DetectorKind::DigitalPc => format!(
                "virtual photon counter: QE {}, dark {} cps, dead time {} s",
                self.config.digital.quantum_efficiency, self.config.digital.dark_rate, self.config.digital.dead_time
            ),
        }
    }
}

/// One-shot detection of a sampled rate trace.
pub fn detect(trace: &RateTrace, config: &DetectorConfig, seed: u64) -> Result<Detection, DetectorError> {
    let mut det = Detector::new(*config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match (config.kind, config.noiseless) {
        (DetectorKind::AnalogPd, _) => Detection::Analog(det.analog(trace, trace.dt, &mut rng)?),
        (DetectorKind::DigitalPc, true) => Detection::Expected { dt: trace.dt, counts: det.expected(trace, trace.dt) },
        (DetectorKind::DigitalPc, false) => Detection::Photons(det.photons(trace, 0.0, &mut rng)),
    })
}
