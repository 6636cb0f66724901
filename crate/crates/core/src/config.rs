//! Lab configuration: one block per virtual instrument, the spin model, the
//! wiring between detectors and acquisition modes, and engine defaults.
//!
//! The file format is TOML. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

use crate::instruments::{
    DaqConfig, DaqMode, DetectorConfig, DetectorKind, HardwareConstraints, LaserModel, MwSwitch, ScannerConfig,
    VirtualSample,
};
use crate::optics::{ConfocalGeometry, Length, ObjectiveSpec, OpticsReport};
use crate::sequence::FixedTimings;
use crate::spin::{BiasField, NvEnsembleParams};

pub const CONFIG_ENV: &str = "VIRTLAB_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("config wiring: {0}")]
    Wiring(String),
    #[error("config constraint: {0}")]
    Constraint(String),
    #[error("config key {key}: {message}")]
    Key { key: String, message: String },
}

impl ConfigError {
    /// Short machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::Io { .. } => "io",
            ConfigError::Parse { .. } => "parse",
            ConfigError::Wiring(_) => "wiring",
            ConfigError::Constraint(_) => "constraint",
            ConfigError::Key { .. } => "key",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    /// Bias field vector (mT).
    pub vector_mt: [f64; 3],
}

impl Default for FieldConfig {
    fn default() -> Self {
        // 1 mT along the first NV axis
        let c = 1.0 / 3f64.sqrt();
        Self { vector_mt: [c, c, c] }
    }
}

impl FieldConfig {
    pub fn bias(&self) -> BiasField {
        BiasField { vector: self.vector_mt.map(|v| v * 1e-3) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MwConfig {
    pub frequency_hz: f64,
    pub power_dbm: f64,
    /// Rabi frequency (Hz) produced at `ref_power_dbm`.
    pub rabi_at_ref_hz: f64,
    pub ref_power_dbm: f64,
    pub min_dwell_s: f64,
    pub heating_coefficient: f64,
    pub switch: MwSwitch,
}

impl Default for MwConfig {
    fn default() -> Self {
        Self {
            frequency_hz: 2.87e9,
            power_dbm: 0.0,
            rabi_at_ref_hz: 5e6,
            ref_power_dbm: 0.0,
            min_dwell_s: 1e-3,
            heating_coefficient: 0.0,
            switch: MwSwitch::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsConfig {
    pub na: f64,
    pub n_immersion: f64,
    pub magnification: f64,
    pub tube_length_mm: f64,
    pub focus_lens_mm: f64,
    pub pump_wavelength_nm: f64,
    pub pl_wavelength_nm: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        let o = ObjectiveSpec::default();
        let g = ConfocalGeometry::default();
        Self {
            na: o.na,
            n_immersion: o.n_immersion,
            magnification: o.magnification,
            tube_length_mm: o.tube_length.mm(),
            focus_lens_mm: g.focus_lens_focal_length.mm(),
            pump_wavelength_nm: g.pump_wavelength.nm(),
            pl_wavelength_nm: g.pl_wavelength.nm(),
        }
    }
}

impl OpticsConfig {
    pub fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            na: self.na,
            n_immersion: self.n_immersion,
            magnification: self.magnification,
            tube_length: Length::from_mm(self.tube_length_mm),
        }
    }

    pub fn geometry(&self) -> ConfocalGeometry {
        ConfocalGeometry {
            focus_lens_focal_length: Length::from_mm(self.focus_lens_mm),
            pump_wavelength: Length::from_nm(self.pump_wavelength_nm),
            pl_wavelength: Length::from_nm(self.pl_wavelength_nm),
        }
    }

    pub fn report(&self) -> Result<OpticsReport, ConfigError> {
        crate::optics::report(&self.objective(), &self.geometry()).map_err(|e| ConfigError::Constraint(e.to_string()))
    }
}

/// Which detector and acquisition mode feed a measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    pub detector: String,
    pub daq_mode: DaqMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WiringConfig {
    /// Route used by any protocol without its own entry.
    pub default: Route,
    pub protocols: BTreeMap<String, Route>,
}

impl Default for WiringConfig {
    fn default() -> Self {
        Self {
            default: Route { detector: "apd".into(), daq_mode: DaqMode::TimeTag },
            protocols: BTreeMap::from([
                ("cw_odmr".to_string(), Route { detector: "apd".into(), daq_mode: DaqMode::BinnedCounts }),
                ("confocal_map".to_string(), Route { detector: "apd".into(), daq_mode: DaqMode::BinnedCounts }),
            ]),
        }
    }
}

impl WiringConfig {
    pub fn route(&self, protocol: &str) -> &Route {
        self.protocols.get(protocol).unwrap_or(&self.default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Static detuning samples per NV orientation.
    pub detuning_samples: usize,
    /// Live partials kept for a lagging consumer.
    pub live_queue: usize,
    /// Pace runs to wall-clock time.
    pub real_time: bool,
    /// Samples excluded at the start of each readout window.
    pub early_exclusion: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { detuning_samples: 96, live_queue: 256, real_time: false, early_exclusion: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub endpoint: String,
    pub heartbeat_s: f64,
    /// Directory of static operator UI assets.
    pub static_dir: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { endpoint: "127.0.0.1:7878".into(), heartbeat_s: 2.0, static_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub seed: u64,
    pub spin: NvEnsembleParams,
    pub field: FieldConfig,
    pub mw: MwConfig,
    pub pulser: HardwareConstraints,
    pub timings: FixedTimings,
    pub laser: LaserModel,
    pub detectors: BTreeMap<String, DetectorConfig>,
    pub daq: DaqConfig,
    pub scanner: ScannerConfig,
    pub optics: OpticsConfig,
    pub sample: VirtualSample,
    pub wiring: WiringConfig,
    pub engine: EngineConfig,
    pub service: ServiceConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            spin: NvEnsembleParams::default(),
            field: FieldConfig::default(),
            mw: MwConfig::default(),
            pulser: HardwareConstraints::default(),
            timings: FixedTimings::default(),
            laser: LaserModel::default(),
            detectors: BTreeMap::from([
                ("apd".to_string(), DetectorConfig::default()),
                ("photodiode".to_string(), DetectorConfig { kind: DetectorKind::AnalogPd, ..Default::default() }),
            ]),
            daq: DaqConfig::default(),
            scanner: ScannerConfig::default(),
            optics: OpticsConfig::default(),
            sample: VirtualSample::default(),
            wiring: WiringConfig::default(),
            engine: EngineConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

fn constraint(msg: impl Into<String>) -> ConfigError {
    ConfigError::Constraint(msg.into())
}

/// Detector and route referenced by `route`, checked for compatibility.
pub fn check_route<'a>(cfg: &'a LabConfig, name: &str, route: &Route) -> Result<&'a DetectorConfig, ConfigError> {
    let det = cfg
        .detectors
        .get(&route.detector)
        .ok_or_else(|| ConfigError::Wiring(format!("{name} references unknown detector '{}'", route.detector)))?;
    match (det.kind, route.daq_mode) {
        (DetectorKind::AnalogPd, DaqMode::TimeTag | DaqMode::BinnedCounts) => Err(ConfigError::Wiring(format!(
            "{name}: analog detector '{}' cannot feed {:?} acquisition",
            route.detector, route.daq_mode
        ))),
        (DetectorKind::DigitalPc, DaqMode::Analog) => Err(ConfigError::Wiring(format!(
            "{name}: photon counter '{}' cannot feed analog acquisition",
            route.detector
        ))),
        _ => Ok(det),
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed > i64::MAX as u64 {
            return Err(constraint("seed must not exceed 9223372036854775807"));
        }
        let tree = toml::Value::try_from(self).map_err(|e| constraint(e.to_string()))?;
        if let Some(key) = non_finite(&tree, String::new()) {
            return Err(constraint(format!("{key} must be a finite number")));
        }
        self.spin.validate().map_err(|e| constraint(e.to_string()))?;
        crate::spin::resonance_frequencies(&self.spin, &self.field.bias()).map_err(|e| constraint(e.to_string()))?;
        self.daq.validate().map_err(|e| constraint(e.to_string()))?;
        for (name, d) in &self.detectors {
            d.validate().map_err(|e| constraint(format!("detector {name}: {e}")))?;
        }
        check_route(self, "wiring.default", &self.wiring.default)?;
        for (p, r) in &self.wiring.protocols {
            check_route(self, &format!("wiring.protocols.{p}"), r)?;
        }
        self.optics.report()?;
        let l = &self.laser;
        if !(l.set_power > 0.0) || l.overshoot_amplitude < 0.0 || !(l.overshoot_decay > 0.0) || !(l.thermal_memory > 0.0) {
            return Err(constraint("laser: power, overshoot decay and thermal memory must be positive, overshoot non-negative"));
        }
        if l.rise_time < 0.0 || l.drift.sigma < 0.0 || !(l.drift.correlation_time > 0.0) || !(l.pump_rate_per_watt > 0.0) {
            return Err(constraint("laser: rise time and drift sigma must be non-negative, rates positive"));
        }
        if !(self.mw.min_dwell_s >= 0.0) || !(self.mw.rabi_at_ref_hz >= 0.0) || !(self.mw.frequency_hz > 0.0) {
            return Err(constraint("mw: frequency must be positive, dwell and drive non-negative"));
        }
        if self.mw.switch.rise_time < 0.0 {
            return Err(constraint("mw.switch.rise_time must be non-negative"));
        }
        if self.pulser.min_pulse_width_ns == 0 || self.pulser.max_instructions == 0 {
            return Err(constraint("pulser limits must be positive"));
        }
        for (i, r) in self.scanner.range_um.iter().enumerate() {
            if !(r[1] > r[0]) {
                return Err(constraint(format!("scanner axis {i} range must be increasing")));
            }
        }
        if !(self.scanner.voltage[1] > self.scanner.voltage[0]) {
            return Err(constraint("scanner voltage span must be increasing"));
        }
        for (i, e) in self.sample.emitters.iter().enumerate() {
            for a in 0..3 {
                self.scanner.check(a, e.position_um[a]).map_err(|err| constraint(format!("sample emitter {i}: {err}")))?;
            }
            if e.n_centers < 0.0 {
                return Err(constraint(format!("sample emitter {i}: negative center count")));
            }
        }
        if self.engine.detuning_samples == 0 || self.engine.live_queue == 0 {
            return Err(constraint("engine.detuning_samples and engine.live_queue must be at least 1"));
        }
        if !(self.service.heartbeat_s > 0.0) {
            return Err(constraint("service.heartbeat_s must be positive"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: LabConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            ConfigError::Parse { line, column, message: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn pump_rate(&self) -> f64 {
        self.laser.pump_rate()
    }

    /// Copy with dotted keys (`mw.power_dbm`) overridden, validated.
    pub fn with_values(&self, values: &[(String, toml::Value)]) -> Result<LabConfig, ConfigError> {
        let mut tree = toml::Value::try_from(self).map_err(|e| constraint(e.to_string()))?;
        for (key, value) in values {
            let bad = |message: &str| ConfigError::Key { key: key.clone(), message: message.into() };
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| bad("empty key"))?;
            let mut node = &mut tree;
            for part in parts {
                let table = node.as_table_mut().ok_or_else(|| bad("not a table"))?;
                node = table.entry(part).or_insert_with(|| toml::Value::Table(Default::default()));
            }
            node.as_table_mut().ok_or_else(|| bad("not a table"))?.insert(last.to_string(), value.clone());
        }
        let cfg: LabConfig = tree.try_into().map_err(|e: toml::de::Error| ConfigError::Key {
            key: values.iter().map(|v| v.0.as_str()).collect::<Vec<_>>().join(","),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dotted path of the first NaN or infinite number in `v`.
fn non_finite(v: &toml::Value, path: String) -> Option<String> {
    match v {
        toml::Value::Float(f) if !f.is_finite() => Some(path),
        toml::Value::Table(t) => t.iter().find_map(|(k, v)| non_finite(v, if path.is_empty() { k.clone() } else { format!("{path}.{k}") })),
        toml::Value::Array(a) => a.iter().enumerate().find_map(|(i, v)| non_finite(v, format!("{path}[{i}]"))),
        _ => None,
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Load and validate a config file.
pub fn load_config(path: &Path) -> Result<LabConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    LabConfig::from_toml(&text)
}
