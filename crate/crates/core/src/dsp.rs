//! Signal processing: pulse extraction, readout-window normalization,
//! common-mode rejection, curve fitting and pi-pulse calibration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("invalid extraction config: {0}")]
    Extraction(String),
    #[error("readout window {index} is too short for the window plan")]
    Window { index: usize },
    #[error("signal lists cannot be paired: {0} vs {1} entries")]
    Pairing(usize, usize),
    #[error("data error: {0}")]
    Data(String),
}

/// Uniformly sampled signal; sample `k` covers `[k*dt, (k+1)*dt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub dt: f64,
    pub values: Vec<f64>,
}

impl Trace {
    pub fn new(dt: f64, values: Vec<f64>) -> Self {
        Self { dt, values }
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.values.len() as f64
    }

    /// Integral over `[a, b)` with fractional edge samples.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let (a, b) = (a.max(0.0), b.min(self.duration()));
        if b <= a {
            return 0.0;
        }
        let i0 = (a / self.dt).floor() as usize;
        let i1 = ((b / self.dt).ceil() as usize).min(self.values.len());
        (i0..i1)
            .map(|i| {
                let lo = (i as f64 * self.dt).max(a);
                let hi = ((i + 1) as f64 * self.dt).min(b);
                self.values[i] * (hi - lo).max(0.0) / self.dt
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    Threshold,
    GaussianDerivative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub method: ExtractionMethod,
    /// Fraction of the signal range (threshold) or of the peak derivative (gaussian).
    pub threshold_level: f64,
    /// Gaussian kernel standard deviation (s).
    pub sigma: f64,
    pub min_pulse_gap: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { method: ExtractionMethod::GaussianDerivative, threshold_level: 0.5, sigma: 20e-9, min_pulse_gap: 100e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Extraction {
    /// `(rise, fall)` times (s), sorted.
    pub pulses: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

/// Normalized Gaussian kernel truncated at +-4 sigma (in samples).
pub fn gaussian_kernel(sigma_samples: f64) -> Vec<f64> {
    let half = (4.0 * sigma_samples).ceil() as i64;
    let mut k: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma_samples * sigma_samples)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Convolution with edge samples replicated.
pub fn smooth(values: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = values.len() as i64;
    let half = (kernel.len() / 2) as i64;
    (0..n)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * values[(i + j as i64 - half).clamp(0, n - 1) as usize])
                .sum()
        })
        .collect()
}

/// Locate laser pulses in a continuously recorded trace.
pub fn extract_pulses(trace: &Trace, cfg: &ExtractionConfig) -> Result<Extraction, DspError> {
    if !(cfg.threshold_level > 0.0 && cfg.threshold_level < 1.0) {
        return Err(DspError::Extraction("threshold_level must lie in (0, 1)".into()));
    }
    if !(trace.dt > 0.0) {
        return Err(DspError::Extraction("sample period must be positive".into()));
    }
    if trace.values.len() < 3 {
        return Ok(Extraction::default());
    }
    match cfg.method {
        ExtractionMethod::Threshold => Ok(threshold_edges(trace, cfg)),
        ExtractionMethod::GaussianDerivative => {
            if !(cfg.sigma > 0.0) || cfg.sigma < 2.0 * trace.dt * (1.0 - 1e-9) {
                return Err(DspError::Extraction("sigma must be at least two sample periods".into()));
            }
            Ok(gaussian_edges(trace, cfg))
        }
    }
}

fn threshold_edges(trace: &Trace, cfg: &ExtractionConfig) -> Extraction {
    let (lo, hi) = trace.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    let mut out = Extraction::default();
    if !(range > 0.0) {
        return out;
    }
    let up = lo + cfg.threshold_level * range;
    let down = up - 0.1 * range;
    let mut high = trace.values[0] >= up;
    let mut rise = if high { None } else { Some(f64::NAN) };
    if high {
        out.warnings.push("trace starts inside a pulse; leading edge dropped".into());
    }
    for (k, &v) in trace.values.iter().enumerate() {
        let t = k as f64 * trace.dt;
        if !high && v >= up {
            high = true;
            rise = Some(t);
        } else if high && v < down {
            high = false;
            if let Some(r) = rise.filter(|r| !r.is_nan()) {
                out.pulses.push((r, t));
            }
            rise = Some(f64::NAN);
        }
    }
    if high && rise.is_some_and(|r| !r.is_nan()) {
        out.warnings.push("trace ends inside a pulse; trailing edge dropped".into());
    }
    out
}

/// Parabolic vertex offset in (-0.5, 0.5) around sample `k`.
fn vertex(d: &[f64], k: usize) -> f64 {
    if k == 0 || k + 1 >= d.len() {
        return 0.0;
    }
    let (a, b, c) = (d[k - 1], d[k], d[k + 1]);
    let den = a - 2.0 * b + c;
    if den == 0.0 {
        0.0
    } else {
        (0.5 * (a - c) / den).clamp(-0.5, 0.5)
    }
}

fn peaks(d: &[f64], level: f64, radius: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (1..d.len().saturating_sub(1))
        .filter(|&k| d[k] > level && d[k] >= d[k - 1] && d[k] > d[k + 1])
        .collect();
    cand.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for k in cand {
        if kept.iter().all(|&j| j.abs_diff(k) > radius) {
            kept.push(k);
        }
    }
    kept.sort_unstable();
    kept
}

fn gaussian_edges(trace: &Trace, cfg: &ExtractionConfig) -> Extraction {
    let sig = cfg.sigma / trace.dt;
    let s = smooth(&trace.values, &gaussian_kernel(sig));
    let d: Vec<f64> = s.windows(2).map(|w| w[1] - w[0]).collect();
    let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = Extraction::default();
    if !(dmax > 0.0) {
        return out;
    }
    let radius = (2.0 * sig).ceil() as usize;
    let level = cfg.threshold_level * dmax;
    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
    let time = |k: usize, off: f64| (k as f64 + 1.0 + off) * trace.dt;
    let rises: Vec<(f64, f64)> = peaks(&d, level, radius).into_iter().map(|k| (time(k, vertex(&d, k)), d[k])).collect();
    let falls: Vec<f64> = peaks(&neg, level, radius).into_iter().map(|k| time(k, vertex(&neg, k))).collect();

    let mut events: Vec<(f64, Option<f64>)> = rises.iter().map(|&(t, h)| (t, Some(h))).collect();
    events.extend(falls.iter().map(|&t| (t, None)));
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pending: Option<(f64, f64)> = None;
    let mut seen_rise = false;
    for (t, h) in events {
        match (h, pending) {
            (Some(h), None) => {
                pending = Some((t, h));
                seen_rise = true;
            }
            (Some(h), Some((_, ph))) => {
                if h > ph {
                    pending = Some((t, h));
                }
            }
            (None, Some((r, _))) => {
                if t - r >= cfg.min_pulse_gap {
                    out.pulses.push((r, t));
                    pending = None;
                }
            }
            (None, None) => {
                if !seen_rise && out.warnings.is_empty() {
                    out.warnings.push(format!("unpaired falling edge at {t:e} s near the trace start"));
                }
            }
        }
    }
    if let Some((r, _)) = pending {
        out.warnings.push(format!("unpaired rising edge at {r:e} s near the trace end"));
    }
    out
}

/// Signal and reference sub-windows relative to the pulse rise (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowPlan {
    pub signal: (f64, f64),
    pub reference: (f64, f64),
}

impl Default for WindowPlan {
    fn default() -> Self {
        Self { signal: (0.0, 300e-9), reference: (1.9e-6, 2.9e-6) }
    }
}

impl WindowPlan {
    pub fn check(&self) -> Result<(), DspError> {
        let ok = self.signal.0 >= 0.0
            && self.signal.1 > self.signal.0
            && self.reference.0 >= self.signal.1
            && self.reference.1 > self.reference.0;
        if ok {
            Ok(())
        } else {
            Err(DspError::Data("window plan needs signal before reference, both non-empty".into()))
        }
    }

    pub fn excluding(mut self, early: f64) -> Self {
        self.signal.0 += early;
        self
    }
}

/// Mean rate in the signal window over mean rate in the reference window, per pulse.
pub fn integrate_normalize(trace: &Trace, windows: &[(f64, f64)], plan: &WindowPlan) -> Result<Vec<f64>, DspError> {
    plan.check()?;
    windows
        .iter()
        .enumerate()
        .map(|(index, &(a, b))| {
            if b - a < plan.reference.1 * (1.0 - 1e-12) {
                return Err(DspError::Window { index });
            }
            let s = trace.integral(a + plan.signal.0, a + plan.signal.1) / (plan.signal.1 - plan.signal.0);
            let r = trace.integral(a + plan.reference.0, a + plan.reference.1) / (plan.reference.1 - plan.reference.0);
            Ok(if r == 0.0 { 0.0 } else { s / r })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonMode {
    pub difference: Vec<f64>,
    pub normalized: Vec<f64>,
}

pub fn common_mode_reject(s0: &[f64], s1: &[f64]) -> Result<CommonMode, DspError> {
    if s0.len() != s1.len() {
        return Err(DspError::Pairing(s0.len(), s1.len()));
    }
    let difference = s0.iter().zip(s1).map(|(a, b)| a - b).collect();
    let normalized = s0
        .iter()
        .zip(s1)
        .map(|(a, b)| if a + b == 0.0 { 0.0 } else { (a - b) / (a + b) })
        .collect();
    Ok(CommonMode { difference, normalized })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    LorentzianMulti,
    ExpDecay,
    DampedCosine,
}

impl FitModel {
    pub fn name(self) -> &'static str {
        match self {
            FitModel::LorentzianMulti => "lorentzian_multi",
            FitModel::ExpDecay => "exp_decay",
            FitModel::DampedCosine => "damped_cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [FitModel::LorentzianMulti, FitModel::ExpDecay, FitModel::DampedCosine].into_iter().find(|m| m.name() == s)
    }
}

pub const MAX_DIPS: usize = 12;
const MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitModel,
    pub params: Vec<(String, f64)>,
    pub residual_rms: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn values(&self) -> Vec<f64> {
        self.params.iter().map(|(_, v)| *v).collect()
    }

    /// Dip centers of a Lorentzian fit, ascending.
    pub fn centers(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self.params.iter().filter(|(n, _)| n.starts_with("center_")).map(|(_, v)| *v).collect();
        c.sort_by(f64::total_cmp);
        c
    }

    pub fn eval(&self, x: f64) -> f64 {
        eval_model(self.model, &self.values(), x)
    }
}

/// Evaluate a model with parameters in the order reported by [`FitResult::params`].
pub fn eval_model(model: FitModel, p: &[f64], x: f64) -> f64 {
    match model {
        FitModel::ExpDecay => p[0] * (-x / p[1]).exp() + p[2],
        FitModel::DampedCosine => p[0] * (2.0 * PI * p[1] * x + p[2]).cos() * (-x / p[3]).exp() + p[4],
        FitModel::LorentzianMulti => {
            let dips: f64 = p[1..]
                .chunks(3)
                .map(|d| {
                    let hw = d[1].abs() / 2.0;
                    let dx = x - d[0];
                    d[2] * hw * hw / (dx * dx + hw * hw)
                })
                .sum();
            p[0] * (1.0 - dips)
        }
    }
}

fn names(model: FitModel, n: usize) -> Vec<String> {
    match model {
        FitModel::ExpDecay => ["amplitude", "T", "offset"].map(String::from).to_vec(),
        FitModel::DampedCosine => ["amplitude", "frequency", "phase", "decay", "offset"].map(String::from).to_vec(),
        FitModel::LorentzianMulti => {
            let mut v = vec!["baseline".to_string()];
            for i in 0..(n - 1) / 3 {
                v.push(format!("center_{i}"));
                v.push(format!("fwhm_{i}"));
                v.push(format!("contrast_{i}"));
            }
            v
        }
    }
}

/// Affine maps between user units and the well-conditioned internal units.
#[derive(Debug, Clone, Copy)]
struct Scale {
    x0: f64,
    xs: f64,
    ys: f64,
}

impl Scale {
    fn to_internal(&self, model: FitModel, p: &[f64]) -> Vec<f64> {
        match model {
            FitModel::ExpDecay => vec![p[0] / self.ys, p[1] / self.xs, p[2] / self.ys],
            FitModel::DampedCosine => vec![p[0] / self.ys, p[1] * self.xs, p[2], p[3] / self.xs, p[4] / self.ys],
            FitModel::LorentzianMulti => {
                let mut v = vec![p[0] / self.ys];
                for d in p[1..].chunks(3) {
                    v.extend([(d[0] - self.x0) / self.xs, d[1] / self.xs, d[2]]);
                }
                v
            }
        }
    }

    fn from_internal(&self, model: FitModel, q: &[f64]) -> Vec<f64> {
        match model {
            FitModel::ExpDecay => vec![q[0] * self.ys, q[1] * self.xs, q[2] * self.ys],
            FitModel::DampedCosine => {
                let (mut a, mut f, mut ph) = (q[0], q[1], q[2]);
                if f < 0.0 {
                    f = -f;
                    ph = -ph;
                }
                if a < 0.0 {
                    a = -a;
                    ph += PI;
                }
                ph = (ph + PI).rem_euclid(2.0 * PI) - PI;
                vec![a * self.ys, f / self.xs, ph, q[3] * self.xs, q[4] * self.ys]
            }
            FitModel::LorentzianMulti => {
                let mut v = vec![q[0] * self.ys];
                for d in q[1..].chunks(3) {
                    v.extend([d[0] * self.xs + self.x0, d[1].abs() * self.xs, d[2]]);
                }
                v
            }
        }
    }
}

/// Damped least squares with a central-difference Jacobian.
fn levenberg_marquardt<F: Fn(&[f64], f64) -> f64>(f: F, x: &[f64], y: &[f64], p0: Vec<f64>) -> (Vec<f64>, f64, bool, usize) {
    let n = x.len();
    let m = p0.len();
    let resid = |p: &[f64]| -> DVector<f64> { DVector::from_iterator(n, x.iter().zip(y).map(|(&xi, &yi)| yi - f(p, xi))) };
    let mut p = p0;
    let mut r = resid(&p);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for it in 1..=MAX_ITER {
        if cost == 0.0 || !cost.is_finite() {
            return (p, cost, cost == 0.0, it - 1);
        }
        let mut j = DMatrix::<f64>::zeros(n, m);
        for k in 0..m {
            let h = 1e-6 * p[k].abs().max(1e-3);
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[k] += h;
            pm[k] -= h;
            for i in 0..n {
                j[(i, k)] = (f(&pp, x[i]) - f(&pm, x[i])) / (2.0 * h);
            }
        }
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for k in 0..m {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(delta) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let rt = resid(&trial);
            let ct = rt.norm_squared();
            if ct.is_finite() && ct <= cost {
                let rel = (cost - ct) / cost.max(f64::MIN_POSITIVE);
                let step = delta.norm();
                let pn = trial.iter().map(|v| v * v).sum::<f64>().sqrt();
                p = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if rel < 1e-9 || step < 1e-10 * (pn + 1e-10) {
                    return (p, cost, true, it);
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !accepted {
            // no downhill step exists at machine precision
            return (p, cost, true, it);
        }
    }
    (p, cost, false, MAX_ITER)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Robust per-point noise estimate from first differences.
pub fn noise_estimate(y: &[f64]) -> f64 {
    if y.len() < 3 {
        return 0.0;
    }
    let mut d: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
    let m = median(&mut d.clone());
    let mut dev: Vec<f64> = d.iter_mut().map(|v| (*v - m).abs()).collect();
    1.4826 * median(&mut dev) / 2f64.sqrt()
}

fn moving_average(y: &[f64], half: usize) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half + 1).min(n);
            y[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect()
}

fn init_lorentzian(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let half = (n / 150).clamp(1, 4);
    let sm = moving_average(y, half);
    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let baseline = sorted[((n as f64 * 0.75) as usize).min(n - 1)];
    let noise = noise_estimate(y);
    let level = baseline - 2.0 * noise;
    let radius = 2 * half + 1;
    let mut seeds: Vec<usize> = (0..n)
        .filter(|&i| {
            sm[i] < level && {
                let a = i.saturating_sub(radius);
                let b = (i + radius + 1).min(n);
                (a..b).all(|j| sm[j] > sm[i] || (sm[j] == sm[i] && j >= i))
            }
        })
        .collect();
    seeds.sort_by(|&a, &b| sm[a].total_cmp(&sm[b]));
    seeds.truncate(MAX_DIPS);
    seeds.sort_unstable();
    let mut p = vec![baseline];
    for &i in &seeds {
        let depth = baseline - sm[i];
        let halfway = baseline - depth / 2.0;
        let mut lo = i;
        while lo > 0 && sm[lo] < halfway {
            lo -= 1;
        }
        let mut hi = i;
        while hi + 1 < n && sm[hi] < halfway {
            hi += 1;
        }
        let fwhm = (x[hi] - x[lo]).abs().max((x[1] - x[0]).abs());
        p.extend([x[i], fwhm, depth / baseline]);
    }
    p
}

fn init_exp(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let tail = (n / 10).max(1);
    let offset = y[n - tail..].iter().sum::<f64>() / tail as f64;
    let sign = if y[0] >= offset { 1.0 } else { -1.0 };
    let floor = 0.05 * (y[0] - offset).abs();
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(_, &v)| sign * (v - offset) > floor)
        .map(|(&xi, &v)| (xi, (sign * (v - offset)).ln()))
        .collect();
    let span = x[n - 1] - x[0];
    if pts.len() >= 2 {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        if slope < 0.0 && slope.is_finite() {
            let t = -1.0 / slope;
            let a = sign * (my - slope * mx).exp();
            return vec![a, t, offset];
        }
    }
    vec![y[0] - offset, span / 3.0, offset]
}

fn init_cosine(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let span = x[n - 1] - x[0];
    let df = 1.0 / (4.0 * span);
    let nyq = 0.5 * (n - 1) as f64 / span;
    let (mut best, mut bf, mut bph) = (0.0, df, 0.0);
    let mut f = df * 2.0;
    while f <= nyq {
        let (mut re, mut im) = (0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y) {
            let ph = 2.0 * PI * f * (xi - x[0]);
            re += (yi - mean) * ph.cos();
            im -= (yi - mean) * ph.sin();
        }
        let pw = re * re + im * im;
        if pw > best {
            best = pw;
            bf = f;
            bph = im.atan2(re);
        }
        f += df;
    }
    let amp = y.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    // phase refers to x = 0 rather than the first sample
    let phase = bph - 2.0 * PI * bf * x[0];
    vec![amp, bf, phase, span, mean]
}

/// Best damped cosine over a frequency grid in `[lo, hi]`, solving amplitude,
/// phase and (unless `offset` is given) the offset linearly at each frequency.
fn scan_cosine(x: &[f64], y: &[f64], p: &[f64], lo: f64, hi: f64, offset: Option<f64>) -> Vec<f64> {
    let span = x.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
    let df = 1.0 / (16.0 * span);
    let steps = (((hi - lo) / df).ceil() as usize).clamp(1, 4000);
    let decay = p[3];
    let mut best = (f64::INFINITY, p.to_vec());
    for k in 0..=steps {
        let f = lo + (hi - lo) * k as f64 / steps as f64;
        if !(f > 0.0) {
            continue;
        }
        let m = if offset.is_some() { 2 } else { 3 };
        let mut ata = DMatrix::<f64>::zeros(m, m);
        let mut atb = DVector::<f64>::zeros(m);
        for (&xi, &yi) in x.iter().zip(y) {
            let e = (-xi / decay).exp();
            let (sn, cs) = (2.0 * PI * f * xi).sin_cos();
            let row = [cs * e, sn * e, 1.0];
            let t = yi - offset.unwrap_or(0.0);
            for a in 0..m {
                atb[a] += row[a] * t;
                for b in 0..m {
                    ata[(a, b)] += row[a] * row[b];
                }
            }
        }
        let Some(c) = ata.lu().solve(&atb) else { continue };
        let q = vec![(c[0] * c[0] + c[1] * c[1]).sqrt(), f, (-c[1]).atan2(c[0]), decay, offset.unwrap_or_else(|| c[2])];
        let cost: f64 = x.iter().zip(y).map(|(&xi, &yi)| (yi - eval_model(FitModel::DampedCosine, &q, xi)).powi(2)).sum();
        if cost < best.0 {
            best = (cost, q);
        }
    }
    best.1
}

/// Least-squares fit of `model` to `(x, y)`. `init` uses the parameter order of the result.
pub fn fit(model: FitModel, x: &[f64], y: &[f64], init: Option<&[f64]>) -> Result<FitResult, DspError> {
    fit_fixed(model, x, y, init, &[])
}

/// Like [`fit`], holding the named parameters at the given values.
pub fn fit_fixed(model: FitModel, x: &[f64], y: &[f64], init: Option<&[f64]>, fixed: &[(&str, f64)]) -> Result<FitResult, DspError> {
    if x.len() != y.len() {
        return Err(DspError::Data(format!("x and y lengths differ ({} vs {})", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(DspError::Data("non-finite sample".into()));
    }
    let mut uniq = x.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    if uniq.len() < 3 {
        return Err(DspError::Data("fewer than 3 distinct x values".into()));
    }
    let mut p0 = match init {
        Some(p) => p.to_vec(),
        None => match model {
            FitModel::LorentzianMulti => init_lorentzian(x, y),
            FitModel::ExpDecay => init_exp(x, y),
            FitModel::DampedCosine => init_cosine(x, y),
        },
    };
    let expected = match model {
        FitModel::ExpDecay => Some(3),
        FitModel::DampedCosine => Some(5),
        FitModel::LorentzianMulti => None,
    };
    if expected.is_some_and(|e| e != p0.len()) || (model == FitModel::LorentzianMulti && (p0.is_empty() || (p0.len() - 1) % 3 != 0)) {
        return Err(DspError::Data(format!("wrong number of initial parameters ({})", p0.len())));
    }
    if model == FitModel::LorentzianMulti && (p0.len() - 1) / 3 > MAX_DIPS {
        return Err(DspError::Data(format!("more than {MAX_DIPS} dips")));
    }
    if x.len() < p0.len() + 2 {
        return Err(DspError::Data(format!("{} points cannot constrain {} parameters", x.len(), p0.len())));
    }
    let all = names(model, p0.len());
    let mut held = Vec::new();
    for (name, v) in fixed {
        let k = all.iter().position(|n| n == name).ok_or_else(|| DspError::Data(format!("{} has no parameter {name}", model.name())))?;
        p0[k] = *v;
        held.push(k);
    }
    if model == FitModel::LorentzianMulti && !held.is_empty() {
        return Err(DspError::Data("lorentzian_multi does not support fixed parameters".into()));
    }
    if model == FitModel::DampedCosine && !held.contains(&1) && p0[3] > 0.0 && p0[1] > 0.0 {
        let f = p0[1];
        let (lo, hi) = if init.is_some() { (0.75 * f, 1.25 * f) } else { (0.9 * f, 1.1 * f) };
        let offset = held.contains(&4).then_some(p0[4]);
        let q = scan_cosine(x, y, &p0, lo, hi, offset);
        p0[0] = q[0];
        p0[1] = q[1];
        p0[2] = q[2];
        p0[4] = q[4];
    }
    let (xmin, xmax) = (uniq[0], uniq[uniq.len() - 1]);
    let ys = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let scale = match model {
        FitModel::LorentzianMulti => Scale { x0: 0.5 * (xmin + xmax), xs: xmax - xmin, ys },
        _ => Scale { x0: 0.0, xs: xmin.abs().max(xmax.abs()), ys },
    };
    let xi: Vec<f64> = x.iter().map(|v| (v - scale.x0) / scale.xs).collect();
    let yi: Vec<f64> = y.iter().map(|v| v / ys).collect();
    let q0 = scale.to_internal(model, &p0);
    let free: Vec<usize> = (0..q0.len()).filter(|k| !held.contains(k)).collect();
    let expand = |r: &[f64]| {
        let mut q = q0.clone();
        free.iter().zip(r).for_each(|(&k, v)| q[k] = *v);
        q
    };
    let (r, mut cost, mut converged, mut iterations) =
        levenberg_marquardt(|r, x| eval_model(model, &expand(r), x), &xi, &yi, free.iter().map(|&k| q0[k]).collect());
    let mut q = expand(&r);
    if model == FitModel::LorentzianMulti && init.is_none() {
        // drop dips that wandered off or inverted, then refit once
        let grid = uniq.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min) / scale.xs;
        let mut kept = vec![q[0]];
        for d in q[1..].chunks(3) {
            if d[2] > 0.0 && d[0].abs() <= 0.5 && d[1].abs() < 1.0 && d[1].abs() >= grid {
                kept.extend_from_slice(d);
            }
        }
        if kept.len() < q.len() {
            let (q2, c2, ok, it) = levenberg_marquardt(|p, x| eval_model(model, p, x), &xi, &yi, kept);
            q = q2;
            cost = c2;
            converged = ok;
            iterations += it;
        }
    }
    let p = scale.from_internal(model, &q);
    let residual_rms = (cost / x.len() as f64).sqrt() * ys;
    Ok(FitResult { model, params: names(model, p.len()).into_iter().zip(p).collect(), residual_rms, converged, iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiCalibration {
    /// Scan point maximizing the smoothed echo difference.
    pub optimum: f64,
    /// Parabolic refinement of `optimum` between neighbouring scan points.
    pub refined: f64,
    pub argmax_half: f64,
    pub argmin_3half: f64,
    /// The individual extrema disagree by more than one scan step.
    pub disagreement: bool,
}

pub fn pi_calibration_analysis(taus: &[f64], echo_half: &[f64], echo_3half: &[f64]) -> Result<PiCalibration, DspError> {
    let n = taus.len();
    if echo_half.len() != n || echo_3half.len() != n {
        return Err(DspError::Pairing(echo_half.len(), echo_3half.len()));
    }
    if n < 5 {
        return Err(DspError::Data("pi calibration needs at least 5 points".into()));
    }
    if taus.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DspError::Data("pulse lengths must be strictly increasing".into()));
    }
    let diff: Vec<f64> = echo_half.iter().zip(echo_3half).map(|(a, b)| a - b).collect();
    let sm = moving_average(&diff, 1);
    let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
    let k = argmax(&sm);
    let ih = argmax(echo_half);
    let neg: Vec<f64> = echo_3half.iter().map(|v| -v).collect();
    let i3 = argmax(&neg);
    let refined = if k > 0 && k + 1 < n {
        let (a, b, c) = (sm[k - 1], sm[k], sm[k + 1]);
        let den = a - 2.0 * b + c;
        let off = if den < 0.0 { (0.5 * (a - c) / den).clamp(-1.0, 1.0) } else { 0.0 };
        let step = if off >= 0.0 { taus[k + 1] - taus[k] } else { taus[k] - taus[k - 1] };
        taus[k] + off * step
    } else {
        taus[k]
    };
    Ok(PiCalibration {
        optimum: taus[k],
        refined,
        argmax_half: taus[ih],
        argmin_3half: taus[i3],
        disagreement: ih.abs_diff(i3) > 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn square(dt: f64, n: usize, pulses: &[(f64, f64)], amp: f64) -> Trace {
        let values = (0..n)
            .map(|k| {
                let t = (k as f64 + 0.5) * dt;
                if pulses.iter().any(|&(a, b)| t >= a && t < b) {
                    amp
                } else {
                    0.0
                }
            })
            .collect();
        Trace::new(dt, values)
    }

    #[test]
    fn clean_edges_both_methods() {
        let tr = square(10e-9, 2000, &[(10e-6, 13e-6)], 1.0);
        for method in [ExtractionMethod::Threshold, ExtractionMethod::GaussianDerivative] {
            let cfg = ExtractionConfig { method, sigma: 0.2e-6, ..Default::default() };
            let e = extract_pulses(&tr, &cfg).unwrap();
            assert_eq!(e.pulses.len(), 1, "{method:?}");
            assert!((e.pulses[0].0 - 10e-6).abs() <= 0.1e-6);
            assert!((e.pulses[0].1 - 13e-6).abs() <= 0.1e-6);
        }
    }

    #[test]
    fn flat_trace_no_pulses() {
        let tr = Trace::new(1e-9, vec![3.0; 100]);
        for method in [ExtractionMethod::Threshold, ExtractionMethod::GaussianDerivative] {
            let cfg = ExtractionConfig { method, sigma: 5e-9, ..Default::default() };
            assert!(extract_pulses(&tr, &cfg).unwrap().pulses.is_empty());
        }
    }

    #[test]
    fn gaussian_translation_equivariant() {
        let cfg = ExtractionConfig { sigma: 40e-9, ..Default::default() };
        let a = extract_pulses(&square(10e-9, 1000, &[(2e-6, 5e-6)], 1.0), &cfg).unwrap();
        let b = extract_pulses(&square(10e-9, 1000, &[(2.5e-6, 5.5e-6)], 1.0), &cfg).unwrap();
        assert!((b.pulses[0].0 - a.pulses[0].0 - 0.5e-6).abs() < 1e-12);
        assert!((b.pulses[0].1 - a.pulses[0].1 - 0.5e-6).abs() < 1e-12);
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(3.3);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k.len(), 2 * 14 + 1);
    }

    #[test]
    fn window_ratio_scale_invariant() {
        let tr = Trace::new(1e-9, (0..3000).map(|k| 1.0 - 0.3 * (-(k as f64) / 200.0).exp()).collect());
        let plan = WindowPlan::default();
        let a = integrate_normalize(&tr, &[(0.0, 3e-6)], &plan).unwrap()[0];
        let tr2 = Trace::new(1e-9, tr.values.iter().map(|v| v * 7.5).collect());
        let b = integrate_normalize(&tr2, &[(0.0, 3e-6)], &plan).unwrap()[0];
        assert!((a - b).abs() < 1e-15 * a.abs().max(1.0) * 4.0);
        assert!(a < 1.0);
        assert!(matches!(integrate_normalize(&tr, &[(0.0, 1e-6)], &plan), Err(DspError::Window { index: 0 })));
    }

    #[test]
    fn common_mode_gain_free() {
        let c = common_mode_reject(&[1.02 * 1.1], &[0.98 * 1.1]).unwrap();
        assert!((c.normalized[0] - 0.02).abs() < 1e-15);
        assert!(common_mode_reject(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(common_mode_reject(&[2.0], &[2.0]).unwrap().normalized, vec![0.0]);
    }

    #[test]
    fn lorentzian_recovery() {
        let x: Vec<f64> = (0..401).map(|k| 2.82e9 + k as f64 * 0.25e6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.02 / 20.0).unwrap();
        let y: Vec<f64> = x
            .iter()
            .map(|&f| eval_model(FitModel::LorentzianMulti, &[1.0, 2.87e9, 10e6, 0.02], f) + noise.sample(&mut rng))
            .collect();
        let r = fit(FitModel::LorentzianMulti, &x, &y, None).unwrap();
        assert!(r.converged, "{:?} it={} rms={}", r.params, r.iterations, r.residual_rms);
        assert_eq!(r.centers().len(), 1, "{:?}", r.params);
        assert!((r.get("center_0").unwrap() - 2.87e9).abs() < 0.5e6);
        assert!((r.get("fwhm_0").unwrap() / 10e6 - 1.0).abs() < 0.1);
    }

    #[test]
    fn exp_recovery() {
        let x: Vec<f64> = (0..30).map(|k| k as f64 * 0.3e-3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let y: Vec<f64> = x.iter().map(|&t| (-t / 3e-3).exp() + noise.sample(&mut rng)).collect();
        let r = fit(FitModel::ExpDecay, &x, &y, None).unwrap();
        assert!((r.get("T").unwrap() / 3e-3 - 1.0).abs() < 0.05);
    }

    #[test]
    fn cosine_recovery() {
        let x: Vec<f64> = (0..80).map(|k| k as f64 * 5e-9).collect();
        let truth = [0.1, 5e6, 0.3, 1e-6, 1.0];
        let y: Vec<f64> = x.iter().map(|&t| eval_model(FitModel::DampedCosine, &truth, t)).collect();
        let r = fit(FitModel::DampedCosine, &x, &y, None).unwrap();
        assert!((r.get("frequency").unwrap() / 5e6 - 1.0).abs() < 1e-3);
        assert!(r.residual_rms < 1e-8 * 0.1);
    }

    #[test]
    fn degenerate_x() {
        assert!(matches!(fit(FitModel::ExpDecay, &[1.0, 1.0, 2.0, 2.0, 2.0, 1.0], &[1.0; 6], None), Err(DspError::Data(_))));
    }

    #[test]
    fn pi_calibration_reduction() {
        let taus: Vec<f64> = (0..9).map(|k| 60e-9 + k as f64 * 10e-9).collect();
        let half: Vec<f64> = taus.iter().map(|t| -((t - 100e-9) / 30e-9).powi(2)).collect();
        let three: Vec<f64> = half.iter().map(|v| 0.3 - v).collect();
        let c = pi_calibration_analysis(&taus, &half, &three).unwrap();
        assert_eq!(c.optimum, taus[half.iter().enumerate().fold(0, |b, (i, v)| if *v > half[b] { i } else { b })]);
        assert!(!c.disagreement);
        assert!(pi_calibration_analysis(&taus[..4], &half[..4], &three[..4]).is_err());
    }

    #[test]
    fn fixed_offset_is_held() {
        let x: Vec<f64> = (0..30).map(|k| k as f64 * 0.3e-3).collect();
        let y: Vec<f64> = x.iter().map(|t| 0.07 * (-t / 3e-3).exp()).collect();
        let r = fit_fixed(FitModel::ExpDecay, &x, &y, None, &[("offset", 0.0)]).unwrap();
        assert_eq!(r.get("offset"), Some(0.0));
        assert!((r.get("T").unwrap() / 3e-3 - 1.0).abs() < 1e-6);
        assert!(fit_fixed(FitModel::ExpDecay, &x, &y, None, &[("baseline", 0.0)]).is_err());
    }

}
