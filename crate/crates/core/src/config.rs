//! Run configuration.
//!
//! TOML, versioned by `schema_version`. Every physical quantity carries its
//! unit in the key name and unknown keys are rejected.
//!
//! ```toml
//! schema_version = 1
//!
//! [system]
//! central_isotope = "13C"
//! central_position_nm = [0.0, 0.0, 1.0]
//! field_mT = 50.0
//! electron = "nv"          # or "none"
//! electron_state = "msM1"
//!
//! [bath]
//! concentration = 0.011
//! radius_nm = 3.0
//! configurations = 4
//! seed = 1
//!
//! [sequence]
//! protocol = "hahn"        # ramsey | hahn | electron-pulsed
//! t_max_ms = 60.0
//! points = 121
//!
//! [engine]
//! method = "gcce"
//! order = 2
//! radius_nm = 0.8
//! ```

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::analysis::DecayModel;
use crate::bath::ElectronState;
use crate::cce::{Method, SamplingMode};
use crate::constants::{DIAMOND_LATTICE_NM, NATURAL_C13_ABUNDANCE};
use crate::error::{Error, Result};
use crate::hamiltonian::Numerator;
use crate::propagation::Spacing;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub bath: BathConfig,
    #[serde(default)]
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Present in written manifests; ignored when re-running one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<toml::Table>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElectronKind {
    None,
    Nv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub central_isotope: String,
    pub central_position_nm: [f64; 3],
    #[serde(rename = "field_mT")]
    pub field_mt: f64,
    pub electron: ElectronKind,
    /// `ms0`, `msM1` or `msP1`.
    pub electron_state: String,
    /// Row-major central hyperfine tensor; point dipole when absent.
    #[serde(rename = "central_hyperfine_MHz", skip_serializing_if = "Option::is_none")]
    pub central_hyperfine_mhz: Option<[f64; 9]>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            central_isotope: "13C".into(),
            central_position_nm: [0.0, 0.0, 0.0],
            field_mt: 50.0,
            electron: ElectronKind::None,
            electron_state: "ms0".into(),
            central_hyperfine_mhz: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BathSource {
    Generate,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BathConfig {
    pub source: BathSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Isotope fraction per lattice site.
    pub concentration: f64,
    /// Spins kept within this distance of the central spin.
    pub radius_nm: f64,
    pub lattice_constant_nm: f64,
    pub isotope: String,
    pub seed: u64,
    pub configurations: usize,
    /// Random spins closer than this to the central spin or the defect
    /// are removed.
    pub exclusion_nm: f64,
}

impl Default for BathConfig {
    fn default() -> Self {
        BathConfig {
            source: BathSource::Generate,
            file: None,
            concentration: NATURAL_C13_ABUNDANCE,
            radius_nm: 3.0,
            lattice_constant_nm: DIAMOND_LATTICE_NM,
            isotope: "13C".into(),
            seed: 1,
            configurations: 1,
            exclusion_nm: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Ramsey,
    Hahn,
    /// Hahn echo with electron π pulses: one at `electron_delta`, or a
    /// train of `electron_pulses`.
    ElectronPulsed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub protocol: Protocol,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub electron_delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub electron_pulses: Option<usize>,
    pub spacing: Spacing,
    pub pulse_seed: u64,
    pub t_max_ms: f64,
    pub points: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            protocol: Protocol::Hahn,
            electron_delta: None,
            electron_pulses: None,
            spacing: Spacing::Constant,
            pulse_seed: 0,
            t_max_ms: 50.0,
            points: 101,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleKind {
    /// Infinite-temperature trace on every cluster.
    Thermal,
    /// Mean over sampled product states.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub method: Method,
    pub order: usize,
    pub radius_nm: f64,
    /// Maximum cluster count per order, starting at order 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caps: Option<Vec<usize>>,
    pub ensemble: EnsembleKind,
    pub samples: usize,
    pub sampling: SamplingMode,
    pub seed: u64,
    pub mean_field: bool,
    pub guard_threshold: f64,
    pub condition_order: u8,
    pub numerator: Numerator,
    #[serde(rename = "degeneracy_threshold_MHz")]
    pub degeneracy_threshold_mhz: f64,
    pub fit: DecayModel,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            method: Method::Gcce,
            order: 2,
            radius_nm: 0.8,
            caps: None,
            ensemble: EnsembleKind::Thermal,
            samples: 20,
            sampling: SamplingMode::Auto,
            seed: 1,
            mean_field: true,
            guard_threshold: crate::cce::GUARD_THRESHOLD,
            condition_order: 2,
            numerator: Numerator::CentralBath,
            degeneracy_threshold_mhz: 1e-6,
            fit: DecayModel::Stretched,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub gnuplot_compatible: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { directory: PathBuf::from("out"), gnuplot_compatible: false }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            system: SystemConfig::default(),
            bath: BathConfig::default(),
            sequence: SequenceConfig::default(),
            engine: EngineConfig::default(),
            output: OutputConfig::default(),
            manifest: None,
        }
    }
}

fn invalid(key: &str, message: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {message}"))
}

fn positive(key: &str, unit: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be a positive number of {unit}, got {v}")))
    }
}

fn non_negative(key: &str, unit: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be a non-negative number of {unit}, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(text, e.span())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config (or a manifest written by a run).
    /// A relative bath file is resolved against the config's directory and
    /// stored as an absolute path, so manifests re-run from anywhere.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let (Some(f), Some(dir)) = (&cfg.bath.file, path.parent()) {
            if f.is_relative() {
                cfg.bath.file = Some(std::path::absolute(dir.join(f))?);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialising config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let s = &self.system;
        if crate::constants::isotope(&s.central_isotope).is_none() {
            return Err(invalid("system.central_isotope", format!("unknown isotope '{}'", s.central_isotope)));
        }
        if !s.central_position_nm.iter().all(|x| x.is_finite()) {
            return Err(invalid("system.central_position_nm", "components must be finite (nm)"));
        }
        if !s.field_mt.is_finite() {
            return Err(invalid("system.field_mT", format!("must be a finite field in mT, got {}", s.field_mt)));
        }
        let state = self.electron_state()?;
        match s.electron {
            ElectronKind::None => {
                if state != ElectronState::Ms0 {
                    return Err(invalid("system.electron_state", "needs system.electron = \"nv\""));
                }
                if s.central_hyperfine_mhz.is_some() {
                    return Err(invalid("system.central_hyperfine_MHz", "needs system.electron = \"nv\""));
                }
            }
            ElectronKind::Nv => {
                if let Some(a) = s.central_hyperfine_mhz {
                    if !a.iter().all(|x| x.is_finite()) {
                        return Err(invalid("system.central_hyperfine_MHz", "components must be finite (MHz)"));
                    }
                    let m = Matrix3::from_row_slice(&a);
                    if (m - m.transpose()).abs().max() > 1e-9 * m.abs().max().max(1.0) {
                        return Err(invalid("system.central_hyperfine_MHz", "tensor must be symmetric (MHz)"));
                    }
                } else if Vector3::from(s.central_position_nm).norm() < 1e-9 {
                    return Err(invalid(
                        "system.central_position_nm",
                        "central spin at the defect needs system.central_hyperfine_MHz",
                    ));
                }
            }
        }

        let b = &self.bath;
        match b.source {
            BathSource::Generate => {
                if !(b.concentration.is_finite() && (0.0..=1.0).contains(&b.concentration)) {
                    return Err(invalid("bath.concentration", format!("must be a fraction in [0, 1], got {}", b.concentration)));
                }
                positive("bath.radius_nm", "nm", b.radius_nm)?;
                positive("bath.lattice_constant_nm", "nm", b.lattice_constant_nm)?;
                if crate::constants::isotope(&b.isotope).is_none() {
                    return Err(invalid("bath.isotope", format!("unknown isotope '{}'", b.isotope)));
                }
            }
            BathSource::File => {
                if b.file.is_none() {
                    return Err(invalid("bath.file", "required when bath.source = \"file\""));
                }
                if b.configurations != 1 {
                    return Err(invalid("bath.configurations", "a bath file is a single configuration"));
                }
            }
        }
        if b.configurations == 0 {
            return Err(invalid("bath.configurations", "must be at least 1"));
        }
        non_negative("bath.exclusion_nm", "nm", b.exclusion_nm)?;

        let q = &self.sequence;
        positive("sequence.t_max_ms", "ms", q.t_max_ms)?;
        if q.points < 2 {
            return Err(invalid("sequence.points", format!("must be at least 2, got {}", q.points)));
        }
        match q.protocol {
            Protocol::Ramsey | Protocol::Hahn => {
                if q.electron_delta.is_some() || q.electron_pulses.is_some() {
                    return Err(invalid("sequence.protocol", "electron pulses need protocol = \"electron-pulsed\""));
                }
            }
            Protocol::ElectronPulsed => {
                if s.electron == ElectronKind::None {
                    return Err(invalid("sequence.protocol", "electron-pulsed needs system.electron = \"nv\""));
                }
                match (q.electron_delta, q.electron_pulses) {
                    (Some(d), None) => {
                        if !(0.0..=1.0).contains(&d) {
                            return Err(invalid("sequence.electron_delta", format!("must be a fraction of the total time in [0, 1], got {d}")));
                        }
                    }
                    (None, Some(n)) if n > 0 => {}
                    (None, Some(_)) => return Err(invalid("sequence.electron_pulses", "must be at least 1")),
                    _ => {
                        return Err(invalid(
                            "sequence.electron_delta",
                            "set exactly one of sequence.electron_delta and sequence.electron_pulses",
                        ))
                    }
                }
            }
        }

        let e = &self.engine;
        if e.order == 0 {
            return Err(invalid("engine.order", "must be at least 1"));
        }
        non_negative("engine.radius_nm", "nm", e.radius_nm)?;
        if let Some(caps) = &e.caps {
            if caps.len() > e.order {
                return Err(invalid("engine.caps", format!("{} entries for order {}", caps.len(), e.order)));
            }
        }
        if e.samples == 0 {
            return Err(invalid("engine.samples", "must be at least 1"));
        }
        if !(e.guard_threshold.is_finite() && e.guard_threshold >= 0.0 && e.guard_threshold < 1.0) {
            return Err(invalid("engine.guard_threshold", format!("must be in [0, 1), got {}", e.guard_threshold)));
        }
        if !matches!(e.condition_order, 1 | 2) {
            return Err(invalid("engine.condition_order", format!("must be 1 or 2, got {}", e.condition_order)));
        }
        positive("engine.degeneracy_threshold_MHz", "MHz", e.degeneracy_threshold_mhz)?;
        Ok(())
    }

    pub fn electron_state(&self) -> Result<ElectronState> {
        self.system
            .electron_state
            .parse()
            .map_err(|_| invalid("system.electron_state", format!("expected ms0, msM1 or msP1, got '{}'", self.system.electron_state)))
    }

    pub fn field_gauss(&self) -> f64 {
        self.system.field_mt * 10.0
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = RunConfig::parse("schema_version = 1\n[system]\nfield_mt = 50\n").unwrap_err();
        assert!(e.to_string().contains("field_mt"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn errors_name_key_and_unit() {
        let e = RunConfig::parse("schema_version = 1\n[sequence]\nt_max_ms = -1\n").unwrap_err();
        let m = e.to_string();
        assert!(m.contains("sequence.t_max_ms") && m.contains("ms"), "{m}");
    }

    #[test]
    fn schema_version_is_required() {
        assert!(RunConfig::parse("[system]\nfield_mT = 50\n").is_err());
        assert!(RunConfig::parse("schema_version = 2\n").is_err());
    }

    #[test]
    fn electron_pulsed_needs_exactly_one_mode() {
        let base = "schema_version = 1\n[system]\nelectron = \"nv\"\ncentral_position_nm = [0, 0, 1]\n[sequence]\nprotocol = \"electron-pulsed\"\n";
        assert!(RunConfig::parse(base).is_err());
        assert!(RunConfig::parse(&format!("{base}electron_delta = 0.7\n")).is_ok());
        assert!(RunConfig::parse(&format!("{base}electron_delta = 0.7\nelectron_pulses = 3\n")).is_err());
    }
}
