//! Config-driven runs: bath → couplings → expansion → analysis, plus sweeps
//! and the (d, Θ) map.
//!
//! Artifacts of a run directory:
//!
//! - `trace.csv`: ensemble-mean coherence,
//! - `traces/config_NNN.csv`: one trace per bath configuration,
//! - `t2.csv`: per-configuration and ensemble T2,
//! - `manifest.toml`: the resolved config plus a `[manifest]` table with
//!   seeds, version and expansion diagnostics. It is itself a valid config.
//!
//! Nothing time- or host-dependent is written, so identical configs give
//! identical files.

use std::fs;
use std::path::Path;

use log::{info, warn};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::analysis::{direction, ensemble_average, fit_t2, EnsembleAverage, T2Fit};
use crate::bath::{generate_lattice, sample_isotopes, BathConfiguration, BathSpin, CentralSystem};
use crate::cce::{enumerate_clusters, sample_bath_states, simulate, CceResult, Ensemble, EngineOptions};
use crate::config::{BathSource, ElectronKind, EnsembleKind, Protocol, RunConfig};
use crate::couplings::InteractionTensor;
use crate::error::{Error, Result};
use crate::hamiltonian::{ConditionOptions, SpinSystem};
use crate::io;
use crate::propagation::{electron_pulse_train, time_grid, CoherenceTrace, PulseSequence};

/// Coincidence tolerance when clearing lattice sites, nm.
const SITE_TOL: f64 = 1e-6;

pub fn central_system(cfg: &RunConfig) -> Result<CentralSystem> {
    let s = &cfg.system;
    let mut spin = BathSpin::new(&s.central_isotope, Vector3::from(s.central_position_nm))?;
    if let Some(a) = s.central_hyperfine_mhz {
        spin = spin.with_hyperfine(InteractionTensor::new(Matrix3::from_row_slice(&a))?);
    }
    match s.electron {
        ElectronKind::None => Ok(CentralSystem::bare(spin, cfg.field_gauss())),
        ElectronKind::Nv => CentralSystem::nv(spin, cfg.field_gauss(), cfg.electron_state()?),
    }
}

pub fn pulse_sequence(cfg: &RunConfig) -> Result<PulseSequence> {
    let q = &cfg.sequence;
    match q.protocol {
        Protocol::Ramsey => Ok(PulseSequence::ramsey()),
        Protocol::Hahn => Ok(PulseSequence::hahn()),
        Protocol::ElectronPulsed => match (q.electron_delta, q.electron_pulses) {
            (Some(d), _) => PulseSequence::hahn_with_electron(d),
            (None, Some(n)) => electron_pulse_train(n, q.spacing, q.pulse_seed)?.with_central_echo(),
            (None, None) => Err(Error::Config("sequence.electron_delta: missing".into())),
        },
    }
}

pub fn times(cfg: &RunConfig) -> Vec<f64> {
    time_grid(cfg.sequence.t_max_ms, cfg.sequence.points)
}

pub fn engine_options(cfg: &RunConfig) -> EngineOptions {
    let e = &cfg.engine;
    EngineOptions {
        method: e.method,
        condition: ConditionOptions {
            order: e.condition_order,
            numerator: e.numerator,
            degeneracy_threshold_mhz: e.degeneracy_threshold_mhz,
        },
        guard_threshold: e.guard_threshold,
        mean_field: e.mean_field,
    }
}

/// Seed of bath configuration `k`.
pub fn bath_seed(cfg: &RunConfig, k: usize) -> u64 {
    cfg.bath.seed.wrapping_add(k as u64)
}

/// Bath configuration `k`: a random lattice occupation within
/// `bath.radius_nm` of the central spin, or the bath file. Sites coinciding
/// with the central spin or the defect, and random spins inside the
/// exclusion radius, are removed.
pub fn bath_configuration(cfg: &RunConfig, k: usize) -> Result<BathConfiguration> {
    let b = &cfg.bath;
    let centre = Vector3::from(cfg.system.central_position_nm);
    let mut avoid = vec![centre];
    if cfg.system.electron != ElectronKind::None {
        avoid.push(Vector3::zeros());
    }
    let bath = match b.source {
        BathSource::File => {
            let path = b.file.as_ref().ok_or_else(|| Error::Config("bath.file: missing".into()))?;
            io::load_bath(path)?
        }
        BathSource::Generate => {
            let half = centre.norm() + b.radius_nm + b.lattice_constant_nm;
            let sites = generate_lattice(Vector3::repeat(2.0 * half), b.lattice_constant_nm)?;
            let sites: Vec<Vector3<f64>> =
                sites.into_iter().filter(|p| (p - centre).norm() <= b.radius_nm).collect();
            sample_isotopes(&sites, b.concentration, bath_seed(cfg, k), &b.isotope)?
        }
    };
    Ok(bath.without_near(&avoid, b.exclusion_nm.max(SITE_TOL)).sorted_by_distance(&centre))
}

#[derive(Clone, Debug)]
pub struct ConfigRun {
    pub index: usize,
    pub seed: u64,
    pub spins: usize,
    pub result: CceResult,
    pub fit: T2Fit,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub configs: Vec<ConfigRun>,
    pub ensemble: EnsembleAverage,
}

impl RunReport {
    pub fn clamps(&self) -> usize {
        self.configs.iter().map(|c| c.result.diagnostics.clamps).sum()
    }
}

/// One bath configuration through the expansion.
pub fn run_configuration(cfg: &RunConfig, k: usize) -> Result<ConfigRun> {
    let system = SpinSystem::new(central_system(cfg)?, bath_configuration(cfg, k)?)?;
    let seq = pulse_sequence(cfg)?;
    let e = &cfg.engine;
    let set = enumerate_clusters(&system.bath, e.order, e.radius_nm, e.caps.as_deref())?;
    let ensemble = match e.ensemble {
        EnsembleKind::Thermal => Ensemble::Thermal,
        EnsembleKind::Sampled => {
            let seed = e.seed.wrapping_add(k as u64);
            Ensemble::States(sample_bath_states(&system.bath, e.samples, seed, e.sampling)?)
        }
    };
    info!(
        "configuration {k}: {} spins, clusters per order {:?}",
        system.len(),
        set.counts()
    );
    let result = simulate(&system, &seq, &times(cfg), engine_options(cfg), &set, &ensemble)?;
    if result.diagnostics.clamps > 0 {
        warn!("configuration {k}: {} clamped cluster corrections", result.diagnostics.clamps);
    }
    let fit = fit_t2(&result.trace, e.fit)?;
    Ok(ConfigRun { index: k, seed: bath_seed(cfg, k), spins: system.len(), result, fit })
}

/// All configurations and their ensemble average, without writing files.
pub fn execute(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let configs = (0..cfg.bath.configurations)
        .map(|k| run_configuration(cfg, k))
        .collect::<Result<Vec<_>>>()?;
    let traces: Vec<CoherenceTrace> = configs.iter().map(|c| c.result.trace.clone()).collect();
    let ensemble = ensemble_average(&traces, cfg.engine.fit)?;
    Ok(RunReport { configs, ensemble })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn fit_cells(f: &T2Fit) -> Vec<String> {
    vec![opt(f.t2_ms), opt(f.stretched_ms), opt(f.exponent), opt(f.residual), opt(f.threshold_ms), opt(f.lower_bound_ms)]
}

const FIT_HEADERS: [&str; 6] = ["t2_ms", "stretched_ms", "exponent", "residual", "threshold_ms", "lower_bound_ms"];

fn write_trace(trace: &CoherenceTrace, path: &Path, gnuplot: bool) -> Result<()> {
    if !gnuplot {
        return io::write_trace(trace, path);
    }
    let rows: Vec<Vec<String>> = trace
        .times
        .iter()
        .zip(&trace.values)
        .map(|(t, l)| vec![format!("{t}"), format!("{}", l.re), format!("{}", l.im), format!("{}", l.norm())])
        .collect();
    io::write_table_file(path, &["t_ms", "re_L", "im_L", "abs_L"], &rows, true)
}

fn manifest_text(cfg: &RunConfig, table: toml::Table) -> Result<String> {
    let mut echo = cfg.clone();
    let mut m = toml::Table::new();
    m.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    m.extend(table);
    echo.manifest = Some(m);
    echo.to_toml()
}

fn diagnostics_table(report: &RunReport) -> toml::Table {
    let mut t = toml::Table::new();
    let arr = |v: Vec<toml::Value>| toml::Value::Array(v);
    let int = |n: usize| toml::Value::Integer(n as i64);
    t.insert("bath_seeds".into(), arr(report.configs.iter().map(|c| toml::Value::Integer(c.seed as i64)).collect()));
    t.insert("bath_spins".into(), arr(report.configs.iter().map(|c| int(c.spins)).collect()));
    t.insert(
        "clusters_per_order".into(),
        arr(report
            .configs
            .iter()
            .map(|c| arr(c.result.diagnostics.clusters_per_order.iter().map(|&n| int(n)).collect()))
            .collect()),
    );
    t.insert("clamps".into(), arr(report.configs.iter().map(|c| int(c.result.diagnostics.clamps)).collect()));
    t.insert("samples".into(), arr(report.configs.iter().map(|c| int(c.result.diagnostics.samples)).collect()));
    t.insert(
        "order_change".into(),
        arr(report
            .configs
            .iter()
            .map(|c| arr(c.result.diagnostics.order_change.iter().map(|&x| toml::Value::Float(x)).collect()))
            .collect()),
    );
    t
}

/// Writes the artifacts of `report` into `dir`.
pub fn write_artifacts(cfg: &RunConfig, report: &RunReport, dir: &Path) -> Result<()> {
    let gnuplot = cfg.output.gnuplot_compatible;
    fs::create_dir_all(dir.join("traces"))?;
    write_trace(&report.ensemble.mean, &dir.join("trace.csv"), gnuplot)?;
    let mut rows = Vec::new();
    for c in &report.configs {
        write_trace(&c.result.trace, &dir.join(format!("traces/config_{:03}.csv", c.index)), gnuplot)?;
        let mut row = vec![c.index.to_string(), c.seed.to_string(), c.spins.to_string()];
        row.extend(fit_cells(&c.fit));
        rows.push(row);
    }
    let mut row = vec!["ensemble".to_string(), String::new(), String::new()];
    row.extend(fit_cells(&report.ensemble.fit));
    rows.push(row);
    let mut headers = vec!["config", "seed", "spins"];
    headers.extend(FIT_HEADERS);
    io::write_table_file(&dir.join("t2.csv"), &headers, &rows, gnuplot)?;
    fs::write(dir.join("manifest.toml"), manifest_text(cfg, diagnostics_table(report))?)?;
    Ok(())
}

/// Full run into `cfg.output.directory`.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    let report = execute(cfg)?;
    write_artifacts(cfg, &report, &cfg.output.directory)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// `system.field_mT`, mT.
    Field,
    /// Distance of the central spin from the defect along its configured
    /// direction (z when at the origin), nm.
    Distance,
    /// `bath.concentration`.
    Concentration,
    /// `engine.order`.
    Order,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "field" => Ok(SweepAxis::Field),
            "distance" => Ok(SweepAxis::Distance),
            "concentration" => Ok(SweepAxis::Concentration),
            "order" => Ok(SweepAxis::Order),
            _ => Err(Error::InvalidArgument(format!("unknown sweep axis '{s}' (field, distance, concentration, order)"))),
        }
    }
}

impl SweepAxis {
    fn unit(self) -> &'static str {
        match self {
            SweepAxis::Field => "field_mT",
            SweepAxis::Distance => "distance_nm",
            SweepAxis::Concentration => "concentration",
            SweepAxis::Order => "order",
        }
    }

    /// Copy of `cfg` with the swept key set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut c = cfg.clone();
        match self {
            SweepAxis::Field => c.system.field_mt = value,
            SweepAxis::Distance => {
                let p = Vector3::from(cfg.system.central_position_nm);
                let dir = if p.norm() > 0.0 { p / p.norm() } else { Vector3::z() };
                c.system.central_position_nm = (dir * value).into();
            }
            SweepAxis::Concentration => c.bath.concentration = value,
            SweepAxis::Order => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Config(format!("engine.order: sweep value {value} is not a positive integer")));
                }
                c.engine.order = value as usize;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub value: f64,
    pub outcome: std::result::Result<RunReport, String>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.points.iter().filter(|p| p.outcome.is_err()).count()
    }

    /// Ensemble T2 (or its lower bound) per value, `NaN` for failures.
    pub fn t2_values(&self) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .map(|p| (p.value, p.outcome.as_ref().map_or(f64::NAN, |r| r.ensemble.fit.value_or_bound())))
            .collect()
    }
}

/// One run per value; failing points are recorded and the sweep goes on.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Validation("sweep needs at least one value".into()));
    }
    cfg.validate()?;
    let points = values
        .iter()
        .map(|&value| {
            info!("sweep {}: {value}", axis.unit());
            let outcome = axis.apply(cfg, value).and_then(|c| execute(&c)).map_err(|e| {
                warn!("sweep {} = {value} failed: {e}", axis.unit());
                e.to_string()
            });
            SweepPoint { value, outcome }
        })
        .collect();
    Ok(SweepReport { axis, points })
}

pub fn write_sweep(cfg: &RunConfig, report: &SweepReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut headers = vec![report.axis.unit(), "status"];
    headers.extend(FIT_HEADERS);
    headers.extend(["max_order_change", "clamps"]);
    let rows: Vec<Vec<String>> = report
        .points
        .iter()
        .map(|p| {
            let mut row = vec![format!("{}", p.value)];
            match &p.outcome {
                Ok(r) => {
                    row.push("ok".into());
                    row.extend(fit_cells(&r.ensemble.fit));
                    let change = r
                        .configs
                        .iter()
                        .filter_map(|c| c.result.diagnostics.order_change.last().copied())
                        .fold(0.0, f64::max);
                    row.push(format!("{change}"));
                    row.push(r.clamps().to_string());
                }
                Err(_) => {
                    row.push("failed".into());
                    row.extend(std::iter::repeat_n(String::new(), FIT_HEADERS.len() + 2));
                }
            }
            row
        })
        .collect();
    io::write_table_file(&dir.join("sweep.csv"), &headers, &rows, cfg.output.gnuplot_compatible)?;
    let mut t = toml::Table::new();
    t.insert("axis".into(), report.axis.unit().into());
    t.insert("values".into(), toml::Value::Array(report.points.iter().map(|p| p.value.into()).collect()));
    let failures: Vec<toml::Value> = report
        .points
        .iter()
        .filter_map(|p| p.outcome.as_ref().err().map(|e| format!("{}: {e}", p.value).into()))
        .collect();
    t.insert("failures".into(), toml::Value::Array(failures));
    fs::write(dir.join("manifest.toml"), manifest_text(cfg, t)?)?;
    Ok(())
}

/// Field used at defect distance `d`: 1 T inside 0.5 nm, where the strong
/// hyperfine must be decoupled, otherwise 50 mT.
pub fn map_field_mt(distance_nm: f64) -> f64 {
    if distance_nm <= 0.5 {
        1000.0
    } else {
        50.0
    }
}

#[derive(Clone, Debug)]
pub struct MapPoint {
    pub distance_nm: f64,
    pub theta_deg: f64,
    pub field_mt: f64,
    pub outcome: std::result::Result<T2Fit, String>,
}

/// Ensemble T2 with the central spin at each `(d, Θ)` (azimuth 0), with the
/// field chosen by [`map_field_mt`].
pub fn t2_map(cfg: &RunConfig, distances_nm: &[f64], thetas_deg: &[f64]) -> Result<Vec<MapPoint>> {
    if distances_nm.is_empty() || thetas_deg.is_empty() {
        return Err(Error::Validation("t2 map needs at least one distance and one angle".into()));
    }
    let mut out = Vec::with_capacity(distances_nm.len() * thetas_deg.len());
    for &d in distances_nm {
        for &theta in thetas_deg {
            let mut c = cfg.clone();
            c.system.central_position_nm = (direction(theta, 0.0) * d).into();
            c.system.field_mt = map_field_mt(d);
            info!("t2 map: d = {d} nm, theta = {theta} deg");
            let outcome = execute(&c).map(|r| r.ensemble.fit).map_err(|e| {
                warn!("t2 map point ({d} nm, {theta} deg) failed: {e}");
                e.to_string()
            });
            out.push(MapPoint { distance_nm: d, theta_deg: theta, field_mt: c.system.field_mt, outcome });
        }
    }
    Ok(out)
}

pub fn write_t2_map(cfg: &RunConfig, points: &[MapPoint], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut headers = vec!["distance_nm", "theta_deg", "field_mT", "status"];
    headers.extend(FIT_HEADERS);
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            let mut row = vec![format!("{}", p.distance_nm), format!("{}", p.theta_deg), format!("{}", p.field_mt)];
            match &p.outcome {
                Ok(f) => {
                    row.push("ok".into());
                    row.extend(fit_cells(f));
                }
                Err(_) => {
                    row.push("failed".into());
                    row.extend(std::iter::repeat_n(String::new(), FIT_HEADERS.len()));
                }
            }
            row
        })
        .collect();
    io::write_table_file(&dir.join("t2_map.csv"), &headers, &rows, cfg.output.gnuplot_compatible)?;
    let mut t = toml::Table::new();
    t.insert("map_points".into(), toml::Value::Integer(points.len() as i64));
    t.insert(
        "failures".into(),
        toml::Value::Integer(points.iter().filter(|p| p.outcome.is_err()).count() as i64),
    );
    fs::write(dir.join("manifest.toml"), manifest_text(cfg, t)?)?;
    Ok(())
}
