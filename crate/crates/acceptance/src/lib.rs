//! End-to-end acceptance checks. Each check runs the lab the way an operator
//! would and reports the measured numbers next to the required tolerance.

use rand::Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

use virtlab_core::config::LabConfig;
use virtlab_core::dsp::{extract_pulses, fit, ExtractionConfig, ExtractionMethod, FitModel, Trace, WindowPlan};
use virtlab_core::engine::{run_pulsed, NoHooks, PulsedRequest, RawRun, RunConfig, VirtualLab};
use virtlab_core::instruments::{daq_acquire, DaqConfig, DaqMode, Detection, PhotonEvents, RawSamples};
use virtlab_core::optics::{collection_bound, confocal_matching, excitation_beam_diameter, resolutions, ConfocalGeometry, Length, ObjectiveSpec};
use virtlab_core::protocols::{derived_mismatches, optimize_cw, replay, run_protocol, CwGrid, ProtocolKind, ProtocolParams, ProtocolRecord};
use virtlab_core::record::{load_record, save_record};
use virtlab_core::rng::SeedTree;
use virtlab_core::sequence::{compile, Averaging, SequenceKind, SequenceSpec, SyncMethod};
use virtlab_core::spin::{resonance_frequencies, BiasField};

/// Result of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!("{} {:<14} {:>7.1}s  {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.seconds, self.detail)
    }
}

/// Records produced by the checks, replayed by the determinism check.
#[derive(Default)]
pub struct Context {
    pub records: Vec<ProtocolRecord>,
}

type Check = fn(&mut Context) -> Result<(bool, String), String>;

/// Every criterion, in run order. `replay` must come last.
pub const CRITERIA: [(&str, Check); 10] = [
    ("optics", optics),
    ("resonances", resonances),
    ("cw_trends", cw_trends),
    ("rabi_pi", rabi_pi),
    ("coherence", coherence),
    ("extraction", extraction),
    ("equivalence", equivalence),
    ("common_mode", common_mode),
    ("daq", daq),
    ("replay", replay_all),
];

pub fn run_one(ctx: &mut Context, name: &'static str, check: Check) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = check(ctx).unwrap_or_else(|e| (false, format!("error: {e}")));
    Outcome { name, pass, detail, seconds: t.elapsed().as_secs_f64() }
}

/// Run the criteria whose names are in `only` (all when empty).
pub fn run_suite(only: &[String], mut report: impl FnMut(&Outcome)) -> Vec<Outcome> {
    let mut ctx = Context::default();
    let mut out = Vec::new();
    for (name, check) in CRITERIA {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        let o = run_one(&mut ctx, name, check);
        report(&o);
        out.push(o);
    }
    out
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn rel(x: f64, target: f64) -> f64 {
    (x - target).abs() / target.abs()
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn protocol(lab: &mut VirtualLab, kind: ProtocolKind, p: &ProtocolParams) -> Result<ProtocolRecord, String> {
    run_protocol(lab, kind, p, &NoHooks).map_err(|e| format!("{}: {e}", kind.name()))
}

fn optics(_: &mut Context) -> Result<(bool, String), String> {
    let t = Instant::now();
    let obj = ObjectiveSpec { na: 0.9, n_immersion: 1.0, magnification: 50.0, tube_length: Length::from_mm(180.0) };
    let eta = collection_bound(&obj).map_err(err)?;
    let res = resolutions(&obj, Length::from_nm(637.0)).map_err(err)?;
    let half = ObjectiveSpec { na: 0.5, ..obj };
    let phi = excitation_beam_diameter(&half).map_err(err)?.mm();
    let geo = ConfocalGeometry { focus_lens_focal_length: Length::from_mm(100.0), ..Default::default() };
    let m = confocal_matching(&obj, &geo).map_err(err)?;
    let elapsed = t.elapsed().as_secs_f64();
    let checks = [
        ("eta", eta, 0.28206, 1e-5),
        ("r_min_nm", res.r_min.nm(), 431.7, 0.1),
        ("z_min_nm", res.z_min.nm(), 1101.0, 1.0),
        ("phi_mm", phi, 4.157, 0.001),
        ("m_tot", m.m_tot, 27.78, 0.01),
        ("r_hole_um", m.r_hole.um(), 26.36, 0.05),
        ("na_fiber", m.na_fiber, 0.0324, 0.0001),
    ];
    let pass = checks.iter().all(|c| within(c.1, c.2, c.3)) && elapsed < 1.0;
    let detail: Vec<String> = checks.iter().map(|c| format!("{}={:.5}", c.0, c.1)).collect();
    Ok((pass, format!("{} runtime={elapsed:.2e}s", detail.join(" "))))
}

fn resonances(ctx: &mut Context) -> Result<(bool, String), String> {
    let t = Instant::now();
    let mut cfg = LabConfig::default();
    // A direction that keeps all eight lines apart by several linewidths.
    cfg.field.vector_mt = [0.87, 0.44, 0.22];
    let predicted = resonance_frequencies(&cfg.spin, &cfg.field.bias()).map_err(err)?;
    let mut lab = VirtualLab::new(cfg);
    let rec = protocol(&mut lab, ProtocolKind::CwOdmr, &ProtocolParams { repeats: Some(320), ..Default::default() })?;
    let n = rec.derived["n_lines"] as usize;
    let f = rec.trace.column("frequency").ok_or("no frequency column")?;
    let step = f.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let worst = if n == predicted.len() {
        (0..n).map(|i| (rec.derived[&format!("line_{i}_hz")] - predicted[i].frequency).abs()).fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    ctx.records.push(rec);
    let elapsed = t.elapsed().as_secs_f64();

    let spin = LabConfig::default().spin;
    let c = 1e-3 / 3f64.sqrt();
    let axial = resonance_frequencies(&spin, &BiasField { vector: [c, c, c] }).map_err(err)?;
    let d = spin.d_zfs;
    let expect = [d - 28e6, d - 28e6 / 3.0, d + 28e6 / 3.0, d + 28e6];
    let axial_ok = axial.len() == 4 && axial.iter().zip(expect).all(|(l, e)| within(l.frequency, e, 0.01e6));
    let axial_off: Vec<String> = axial.iter().map(|l| format!("{:+.3}", (l.frequency - d) / 1e6)).collect();
    let pass = n == 8 && worst <= step / 2.0 && axial_ok && elapsed < 30.0;
    Ok((
        pass,
        format!(
            "dips={n} worst_center_error={:.1}kHz (limit {:.1}kHz) axial_lines_MHz=[{}] runtime={elapsed:.1}s",
            worst / 1e3,
            step / 2e3,
            axial_off.join(",")
        ),
    ))
}

fn noiseless() -> LabConfig {
    let mut cfg = LabConfig::default();
    for d in cfg.detectors.values_mut() {
        d.noiseless = true;
    }
    cfg
}

fn cw_trends(_: &mut Context) -> Result<(bool, String), String> {
    let cfg = noiseless();
    let params = ProtocolParams { repeats: Some(1), ..Default::default() };
    let mw_grid = CwGrid { mw_powers_dbm: (0..10).map(|k| -30.0 + 3.0 * k as f64).collect(), laser_powers: vec![1e-3], ..Default::default() };
    let r = optimize_cw(&mut VirtualLab::new(cfg.clone()), &mw_grid, &params, &NoHooks).map_err(err)?;
    let fwhm: Vec<f64> = r.points.iter().map(|p| p.fwhm_hz).collect();
    let monotone = fwhm.iter().all(|f| f.is_finite()) && fwhm.windows(2).all(|w| w[1] >= w[0]);

    let lasers: Vec<f64> = (0..10).map(|k| 0.05e-3 * 2f64.powi(k)).collect();
    let laser_grid = CwGrid { mw_powers_dbm: vec![-10.0], laser_powers: lasers, ..Default::default() };
    let r = optimize_cw(&mut VirtualLab::new(cfg.clone()), &laser_grid, &params, &NoHooks).map_err(err)?;
    let contrast: Vec<f64> = r.points.iter().map(|p| p.contrast).collect();
    let peak = contrast.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
    let unimodal = contrast[..=peak].windows(2).all(|w| w[1] >= w[0]) && contrast[peak..].windows(2).all(|w| w[1] <= w[0]);
    let interior = peak > 0 && peak + 1 < contrast.len();

    let limit = 1.0 / (std::f64::consts::PI * cfg.spin.t2_star);
    let zero = CwGrid { mw_powers_dbm: vec![-80.0], laser_powers: vec![1e-7], half_span: 2e6, ..Default::default() };
    let p0 = ProtocolParams { step: Some(10e3), ..params };
    let r = optimize_cw(&mut VirtualLab::new(cfg), &zero, &p0, &NoHooks).map_err(err)?;
    let f0 = r.points[0].fwhm_hz;
    let pass = monotone && unimodal && interior && rel(f0, limit) <= 0.02;
    let khz: Vec<String> = fwhm.iter().map(|f| format!("{:.0}", f / 1e3)).collect();
    let pct: Vec<String> = contrast.iter().map(|c| format!("{:.2}", c * 100.0)).collect();
    Ok((
        pass,
        format!(
            "fwhm_kHz=[{}] contrast_pct=[{}] peak_index={peak} zero_power_fwhm={:.1}kHz vs {:.1}kHz ({:+.2}%)",
            khz.join(","),
            pct.join(","),
            f0 / 1e3,
            limit / 1e3,
            100.0 * (f0 / limit - 1.0)
        ),
    ))
}

/// Rabi pi and pi-calibration optimum on a lab, in seconds.
fn pi_pair(ctx: &mut Context, cfg: LabConfig) -> Result<(f64, f64, f64), String> {
    let mut lab = VirtualLab::new(cfg);
    let rabi = protocol(&mut lab, ProtocolKind::Rabi, &ProtocolParams::default())?;
    let pi = rabi.derived["pi_s"];
    let cal = protocol(&mut lab, ProtocolKind::PiCalibration, &ProtocolParams { pi: Some(pi), ..Default::default() })?;
    let scan = cal.derived["pi_scan_s"];
    let x = cal.trace.column("tau").ok_or("no tau column")?;
    let step = x.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    ctx.records.push(rabi);
    ctx.records.push(cal);
    Ok((pi, scan, step))
}

fn rabi_pi(ctx: &mut Context) -> Result<(bool, String), String> {
    let (pi, scan, step) = pi_pair(ctx, LabConfig::default())?;
    let mut distorted = LabConfig::default();
    distorted.mw.switch.rise_time = 20e-9;
    let (dpi, dscan, _) = pi_pair(ctx, distorted)?;
    let pass = within(pi, 100e-9, 2e-9) && (scan - pi).abs() <= step + 1e-15 && (dscan - dpi).abs() > step;
    Ok((
        pass,
        format!(
            "rabi_pi={:.2}ns calibration={:.2}ns step={:.1}ns | distorted edges: rabi_pi={:.2}ns calibration={:.2}ns",
            pi * 1e9,
            scan * 1e9,
            step * 1e9,
            dpi * 1e9,
            dscan * 1e9
        ),
    ))
}

fn coherence(ctx: &mut Context) -> Result<(bool, String), String> {
    let t = Instant::now();
    let cfg = LabConfig::default();
    let truth = cfg.spin.clone();
    let mut lab = VirtualLab::new(cfg);
    let rabi = protocol(&mut lab, ProtocolKind::Rabi, &ProtocolParams::default())?;
    let p = ProtocolParams { pi: Some(rabi.derived["pi_s"]), ..Default::default() };
    let t1 = protocol(&mut lab, ProtocolKind::T1, &p)?;
    let ramsey = protocol(&mut lab, ProtocolKind::Ramsey, &p)?;
    let hahn = protocol(&mut lab, ProtocolKind::HahnEcho, &p)?;
    let elapsed = t.elapsed().as_secs_f64();
    let (ft1, ft2s, ft2, det) = (t1.derived["t1_s"], ramsey.derived["t2_star_s"], hahn.derived["t2_s"], ramsey.derived["detuning_hz"]);
    ctx.records.extend([rabi, t1, ramsey, hahn]);
    let pass = rel(ft1, truth.t1) <= 0.1
        && rel(ft2s, truth.t2_star) <= 0.1
        && rel(ft2, truth.t2) <= 0.1
        && rel(det, p.detuning) <= 0.02
        && ft2 <= 2.0 * ft1
        && elapsed < 300.0;
    Ok((
        pass,
        format!(
            "T1={:.3}ms ({:+.1}%) T2*={:.3}us ({:+.1}%) T2={:.2}us ({:+.1}%) fringe={:.4}MHz ({:+.2}%) runtime={elapsed:.0}s",
            ft1 * 1e3,
            100.0 * (ft1 / truth.t1 - 1.0),
            ft2s * 1e6,
            100.0 * (ft2s / truth.t2_star - 1.0),
            ft2 * 1e6,
            100.0 * (ft2 / truth.t2 - 1.0),
            det / 1e6,
            100.0 * (det / p.detuning - 1.0)
        ),
    ))
}

fn square(dt: f64, n: usize, pulses: &[(f64, f64)]) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            if pulses.iter().any(|&(a, b)| t >= a && t < b) { 1.0 } else { 0.0 }
        })
        .collect()
}

/// Detections that match no true pulse. A match is a rise within a quarter
/// pulse width of a true rise not matched before.
fn false_detections(found: &[(f64, f64)], truth: &[(f64, f64)], width: f64) -> usize {
    let mut used = vec![false; truth.len()];
    let mut false_count = 0;
    for &(rise, _) in found {
        match truth.iter().enumerate().position(|(i, t)| !used[i] && (t.0 - rise).abs() <= width / 4.0) {
            Some(i) => used[i] = true,
            None => false_count += 1,
        }
    }
    false_count
}

fn extraction(_: &mut Context) -> Result<(bool, String), String> {
    let sigma = 0.2e-6;
    let dt = 10e-9;
    let clean = Trace::new(dt, square(dt, 2000, &[(10e-6, 13e-6)]));
    let mut edge_err: f64 = 0.0;
    let mut clean_ok = true;
    for method in [ExtractionMethod::Threshold, ExtractionMethod::GaussianDerivative] {
        let e = extract_pulses(&clean, &ExtractionConfig { method, sigma, ..Default::default() }).map_err(err)?;
        clean_ok &= e.pulses.len() == 1;
        if let Some(&(r, f)) = e.pulses.first() {
            edge_err = edge_err.max((r - 10e-6).abs()).max((f - 13e-6).abs());
        }
    }
    clean_ok &= edge_err <= sigma / 2.0;

    let width = 1e-6;
    let period = 2.5e-6;
    let truth: Vec<(f64, f64)> = (0..50).map(|k| (2e-6 + k as f64 * period, 2e-6 + k as f64 * period + width)).collect();
    let n = ((truth.last().unwrap().1 + 2e-6) / dt) as usize;
    let base = square(dt, n, &truth);
    let tree = SeedTree::new(0x5eed);
    let (mut thr, mut gau) = (0usize, 0usize);
    for seed in 0..100u64 {
        let mut rng = tree.stream(&[seed]);
        let noisy: Vec<f64> = base.iter().map(|v| v + 0.4 * rng.sample::<f64, _>(StandardNormal)).collect();
        let tr = Trace::new(dt, noisy);
        let t = extract_pulses(&tr, &ExtractionConfig { method: ExtractionMethod::Threshold, ..Default::default() }).map_err(err)?;
        let g = extract_pulses(&tr, &ExtractionConfig { method: ExtractionMethod::GaussianDerivative, sigma: width / 10.0, ..Default::default() })
            .map_err(err)?;
        thr += false_detections(&t.pulses, &truth, width);
        gau += false_detections(&g.pulses, &truth, width);
    }
    let pass = clean_ok && gau < thr;
    Ok((pass, format!("clean edge error={:.1}ns (limit {:.0}ns) false detections over 100 seeds: threshold={thr} gaussian={gau}", edge_err * 1e9, sigma * 5e8)))
}

fn pulsed(cfg: &LabConfig, avg: Averaging, sync: SyncMethod, repeats: u32, blind: bool) -> Result<RawRun, String> {
    let spec = SequenceSpec::new(SequenceKind::Rabi, (0..11).map(|k| k as f64 * 20e-9).collect());
    let seq = compile(&spec, &cfg.pulser, sync, avg, repeats).map_err(err)?;
    let run = RunConfig { averaging: avg, sync, repeats, seed: 11, blind, ..RunConfig::for_protocol(cfg, "rabi") };
    run_pulsed(&mut VirtualLab::new(cfg.clone()), &PulsedRequest { seq, run }, &NoHooks).map_err(err)
}

fn equivalence(_: &mut Context) -> Result<(bool, String), String> {
    let quiet = noiseless();
    let plan = WindowPlan::default();
    let np = pulsed(&quiet, Averaging::Np, SyncMethod::Method2, 20, false)?.signals(&plan).map_err(err)?;
    let pn = pulsed(&quiet, Averaging::Pn, SyncMethod::Method2, 20, false)?.signals(&plan).map_err(err)?;
    let avg_dev = np[0].iter().zip(&pn[0]).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);

    let cfg = LabConfig::default();
    let m1 = pulsed(&cfg, Averaging::Pn, SyncMethod::Method1, 20_000, true)?.window_integrals();
    let m2 = pulsed(&cfg, Averaging::Pn, SyncMethod::Method2, 20_000, false)?.window_integrals();
    let sync_dev = m1[0].iter().zip(&m2[0]).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    let pass = avg_dev <= 1e-9 && sync_dev <= 5e-3;
    Ok((pass, format!("noiseless NP vs PN max rel dev={avg_dev:.2e} (limit 1e-9) method1+extraction vs method2 max rel dev={:.3}% (limit 0.5%)", sync_dev * 100.0)))
}

/// Common-mode and raw-S0 T1 fits on a lab, in seconds.
fn t1_fits(ctx: &mut Context, cfg: LabConfig) -> Result<(f64, f64), String> {
    let mut lab = VirtualLab::new(cfg);
    let rabi = protocol(&mut lab, ProtocolKind::Rabi, &ProtocolParams::default())?;
    let p = ProtocolParams { pi: Some(rabi.derived["pi_s"]), ..Default::default() };
    let rec = protocol(&mut lab, ProtocolKind::T1, &p)?;
    let cm = rec.derived["t1_s"];
    let x = rec.trace.column("tau").ok_or("no tau column")?;
    let s0 = rec.trace.column("s0_counts").ok_or("no s0 column")?;
    let raw = fit(FitModel::ExpDecay, &x, &s0, None).map_err(err)?.get("T").ok_or("no T")?;
    ctx.records.extend([rabi, rec]);
    Ok((cm, raw))
}

fn common_mode(ctx: &mut Context) -> Result<(bool, String), String> {
    let truth = LabConfig::default().spin.t1;
    let (_, clean_raw) = t1_fits(ctx, LabConfig::default())?;
    let mut cfg = LabConfig::default();
    cfg.laser.drift.sigma = 0.01;
    cfg.laser.drift.correlation_time = 100.0;
    cfg.laser.overshoot_amplitude = 0.1;
    cfg.laser.overshoot_decay = 1e-6;
    cfg.laser.thermal_memory = 1e-3;
    let (cm, raw) = t1_fits(ctx, cfg)?;
    let pass = rel(cm, truth) <= 0.05 && rel(raw, truth) > 0.05;
    let pct = |v: f64| 100.0 * (v / truth - 1.0);
    Ok((
        pass,
        format!(
            "with drift+overshoot: common-mode T1={:.3}ms ({:+.1}%) raw S0 T1={:.4e}ms ({:+.1}%) | clean lab raw S0 T1={:.3}ms ({:+.1}%)",
            cm * 1e3,
            pct(cm),
            raw * 1e3,
            pct(raw),
            clean_raw * 1e3,
            pct(clean_raw)
        ),
    ))
}

fn daq(_: &mut Context) -> Result<(bool, String), String> {
    let cfg = DaqConfig { counter_clock: 100e6, ..Default::default() };
    let mut rng = SeedTree::new(3).stream(&[0]);
    let mut times: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>() * 1e-3).collect();
    times.sort_by(f64::total_cmp);
    let ev = Detection::Photons(PhotonEvents { duration: 1e-3, times: times.clone() });
    let RawSamples::TimeTags { resolution, tags } = daq_acquire(&ev, DaqMode::TimeTag, &cfg).map_err(err)? else {
        return Err("time tag mode returned another sample type".into());
    };
    let floor_ok = tags.len() == times.len()
        && times.iter().zip(&tags).all(|(t, &k)| {
            let q = k as f64 * resolution;
            q <= t + 1e-15 && t - q < resolution
        });
    let two = DaqConfig { n_analog_channels: 2, adc_period: 0.5e-6, ..Default::default() };
    let period = two.analog_period();
    let pass = resolution == 5e-9 && floor_ok && period == 1.0e-6;
    Ok((pass, format!("tag resolution={:.3}ns floor rule holds={floor_ok} two-channel analog period={:.3}us", resolution * 1e9, period * 1e6)))
}

fn replay_all(ctx: &mut Context) -> Result<(bool, String), String> {
    if ctx.records.is_empty() {
        let mut lab = VirtualLab::new(LabConfig::default());
        ctx.records.push(protocol(&mut lab, ProtocolKind::Rabi, &ProtocolParams::default())?);
    }
    let dir = tempfile::tempdir().map_err(err)?;
    let mut bad = Vec::new();
    for rec in &ctx.records {
        let path = save_record(dir.path(), rec).map_err(err)?;
        let loaded = load_record(&path).map_err(err)?.record;
        let again = replay(&loaded, &NoHooks).map_err(err)?;
        let diff = derived_mismatches(rec, &again);
        if !diff.is_empty() || again.derived.is_empty() {
            bad.push(format!("{}: {}", rec.kind.name(), diff.join(",")));
        }
    }
    let kinds: Vec<&str> = ctx.records.iter().map(|r| r.kind.name()).collect();
    Ok((bad.is_empty(), format!("{} records replayed bit-identically [{}]{}", ctx.records.len() - bad.len(), kinds.join(","), if bad.is_empty() { String::new() } else { format!(" mismatches: {}", bad.join("; ")) })))
}
