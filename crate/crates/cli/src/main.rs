use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};
use nalgebra::Vector3;

use spinbath::analysis::{self, frozen_core_scan, ray_grid, DecayModel, PairModel};
use spinbath::bath::{apply_exclusion, generate_lattice, sample_isotopes, ElectronState};
use spinbath::cce::{sample_bath_states, Method};
use spinbath::config::{EnsembleKind, RunConfig};
use spinbath::couplings::{grid_hyperfine, GridOptions};
use spinbath::hamiltonian::SpinSystem;
use spinbath::oracles::{self, ExactEnsemble, TwoSpinModel, EXACT_CAPACITY};
use spinbath::pipeline::{self, SweepAxis};
use spinbath::propagation::time_grid;
use spinbath::{io, Error, Result};

#[derive(Parser)]
#[command(name = "spinbath", version, about = "Cluster-correlation expansion simulator for nuclear spin coherence")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Space-separated tables with a `#` header line.
    #[arg(long, global = true)]
    gnuplot_compatible: bool,
    /// Repeat for more log output on standard error.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Random lattice bath written as a bath file.
    GenerateBath(GenerateBath),
    /// Coupling table of a bath file relative to a central spin.
    Couplings(Couplings),
    /// Full pipeline from a config (or manifest).
    Simulate(Simulate),
    /// One run per value of a swept key.
    SweepField(Sweep),
    /// Ensemble T2 over a (distance, polar angle) grid.
    T2Map(T2Map),
    /// Frozen-core radius from the pair model.
    FrozenCore(FrozenCore),
    /// Closed-form and brute-force references.
    #[command(subcommand)]
    Oracle(Oracle),
    /// T2 of a trace file.
    Fit(Fit),
}

#[derive(Args)]
struct GenerateBath {
    /// Edge lengths of the box centred on the defect, nm.
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], default_values_t = [6.0, 6.0, 6.0])]
    extent: Vec<f64>,
    #[arg(long, default_value_t = 0.011)]
    abundance: f64,
    #[arg(long, default_value_t = spinbath::constants::DIAMOND_LATTICE_NM)]
    lattice_constant_nm: f64,
    #[arg(long, default_value = "13C")]
    isotope: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Bath file of fixed spins; random spins within `--cutoff` of them are dropped.
    #[arg(long)]
    exclude_file: Option<PathBuf>,
    /// Exclusion radius around the fixed spins, nm.
    #[arg(long, default_value_t = 0.0)]
    cutoff: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct HyperfineSource {
    /// Spin density in cube format.
    #[arg(long)]
    density: Option<PathBuf>,
    /// Point-dipole tensors (tensors already in the bath file are kept).
    #[arg(long)]
    point_dipole: bool,
}

#[derive(Args)]
struct Couplings {
    #[arg(long)]
    bath: PathBuf,
    #[command(flatten)]
    source: HyperfineSource,
    /// Integral the density file is normalized to.
    #[arg(long, default_value_t = 1.0)]
    normalization: f64,
    /// Bath file with the hyperfine tensor of every spin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Overrides {
    #[arg(long = "field-mT")]
    field_mt: Option<f64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    radius_nm: Option<f64>,
    #[arg(long)]
    configurations: Option<usize>,
    #[arg(long)]
    bath_seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Simulate {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Extra copy of the ensemble trace.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value_t = AxisArg::Field)]
    axis: AxisArg,
    /// Comma-separated values (mT for field, nm for distance).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    values: Vec<f64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Field,
    Distance,
    Concentration,
    Order,
}

#[derive(Args)]
struct T2Map {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0, 3.0, 5.0])]
    distances_nm: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 30.0, 55.0, 90.0, 125.0, 150.0, 180.0])]
    thetas_deg: Vec<f64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum ElectronArg {
    None,
    Ms0,
    MsM1,
}

#[derive(Args)]
struct FrozenCore {
    #[arg(long, default_value_t = 0.011)]
    concentration: f64,
    #[arg(long, value_enum, default_value_t = ElectronArg::MsM1)]
    electron: ElectronArg,
    #[arg(long, default_value_t = 5.0)]
    dtheta_deg: f64,
    #[arg(long, default_value_t = 15.0)]
    dphi_deg: f64,
    /// Radial step and range of the scan, nm.
    #[arg(long, default_value_t = 0.1)]
    step_nm: f64,
    #[arg(long, default_value_t = 0.3)]
    min_nm: f64,
    #[arg(long, default_value_t = 8.0)]
    max_nm: f64,
    #[arg(long)]
    configurations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pair-model calibration (TOML with the `PairModel` keys).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(short, long, default_value = "frozen-core")]
    output: PathBuf,
}

#[derive(Subcommand)]
enum Oracle {
    /// Closed-form echo of a central spin with one flip-flop partner.
    TwoSpin {
        #[arg(long, default_value_t = 536.0)]
        w0_khz: f64,
        #[arg(long, default_value_t = 536.2)]
        w1_khz: f64,
        #[arg(long, default_value_t = 0.151)]
        sigma_khz: f64,
        #[arg(long, default_value_t = 40.0)]
        t_max_ms: f64,
        #[arg(long, default_value_t = 401)]
        points: usize,
    },
    /// Brute-force evolution of the first configuration of a config.
    Exact {
        config: PathBuf,
        #[arg(long, default_value_t = EXACT_CAPACITY)]
        capacity: usize,
    },
    /// Hybridization-limited T2 of the first-shell nucleus over a field sweep.
    Hybridization {
        /// Fields, mT.
        #[arg(long = "fields-mT", value_delimiter = ',', default_values_t = [300.0, 1000.0, 3000.0])]
        fields_mt: Vec<f64>,
        #[arg(long, default_value_t = 0.31)]
        c_ms: f64,
    },
}

#[derive(Args)]
struct Fit {
    trace: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Stretched)]
    model: ModelArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Stretched,
    Threshold,
}

fn load(path: &Path, o: &Overrides, gnuplot: bool) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(v) = o.field_mt {
        cfg.system.field_mt = v;
    }
    if let Some(v) = o.method {
        cfg.engine.method = v;
    }
    if let Some(v) = o.order {
        cfg.engine.order = v;
    }
    if let Some(v) = o.radius_nm {
        cfg.engine.radius_nm = v;
    }
    if let Some(v) = o.configurations {
        cfg.bath.configurations = v;
    }
    if let Some(v) = o.bath_seed {
        cfg.bath.seed = v;
    }
    if let Some(v) = o.samples {
        cfg.engine.samples = v;
        cfg.engine.ensemble = EnsembleKind::Sampled;
    }
    if let Some(v) = o.seed {
        cfg.engine.seed = v;
    }
    if let Some(v) = &o.output_dir {
        cfg.output.directory = v.clone();
    }
    cfg.output.gnuplot_compatible |= gnuplot;
    cfg.manifest = None;
    cfg.validate()?;
    Ok(cfg)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_fit(label: &str, f: &analysis::T2Fit) {
    match f.t2_ms {
        Some(t) => println!(
            "{label}: T2 = {t:.4} ms (stretched {} ms, n = {}, 1/e crossing {} ms)",
            fmt(f.stretched_ms),
            fmt(f.exponent),
            fmt(f.threshold_ms)
        ),
        None => println!("{label}: unresolved, T2 > {} ms", fmt(f.lower_bound_ms)),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let gnuplot = cli.gnuplot_compatible;
    match cli.command {
        Command::GenerateBath(a) => {
            let extent = Vector3::new(a.extent[0], a.extent[1], a.extent[2]);
            let sites = generate_lattice(extent, a.lattice_constant_nm)?;
            let mut bath = sample_isotopes(&sites, a.abundance, a.seed, &a.isotope)?;
            if let Some(path) = &a.exclude_file {
                let fixed = io::load_bath(path)?;
                let (b, removed) = apply_exclusion(&bath, &fixed.spins, a.cutoff)?;
                info!("{removed} spins excluded around {} fixed spins", fixed.len());
                bath = b;
            }
            io::save_bath(&bath, &a.out)?;
            info!("{} spins written to {}", bath.len(), a.out.display());
        }
        Command::Couplings(a) => {
            let mut bath = io::load_bath(&a.bath)?;
            let ge = spinbath::constants::GAMMA_ELECTRON;
            let density = match &a.source.density {
                Some(p) => Some(io::load_cube(p, a.normalization)?),
                None => None,
            };
            for s in &mut bath.spins {
                s.hyperfine = Some(match &density {
                    Some(d) => grid_hyperfine(&s.position, d, s.gamma, ge, GridOptions::default())?,
                    None => s.hyperfine_or_point_dipole(ge)?,
                });
            }
            io::save_bath(&bath, &a.out)?;
            info!("{} tensors written to {}", bath.len(), a.out.display());
        }
        Command::Simulate(a) => {
            let cfg = load(&a.config, &a.overrides, gnuplot)?;
            let report = pipeline::run(&cfg)?;
            if let Some(p) = &a.out {
                io::write_trace(&report.ensemble.mean, p)?;
            }
            for c in &report.configs {
                print_fit(&format!("config {} (seed {}, {} spins)", c.index, c.seed, c.spins), &c.fit);
            }
            print_fit("ensemble", &report.ensemble.fit);
            info!("artifacts in {}", cfg.output.directory.display());
        }
        Command::SweepField(a) => {
            let cfg = load(&a.config, &a.overrides, gnuplot)?;
            let axis = match a.axis {
                AxisArg::Field => SweepAxis::Field,
                AxisArg::Distance => SweepAxis::Distance,
                AxisArg::Concentration => SweepAxis::Concentration,
                AxisArg::Order => SweepAxis::Order,
            };
            let report = pipeline::sweep(&cfg, axis, &a.values)?;
            pipeline::write_sweep(&cfg, &report, &cfg.output.directory)?;
            for (v, t2) in report.t2_values() {
                println!("{v}\t{t2}");
            }
            if report.failures() > 0 {
                error!("{} of {} sweep points failed", report.failures(), report.points.len());
                return Ok(ExitCode::from(4));
            }
        }
        Command::T2Map(a) => {
            let cfg = load(&a.config, &a.overrides, gnuplot)?;
            let points = pipeline::t2_map(&cfg, &a.distances_nm, &a.thetas_deg)?;
            pipeline::write_t2_map(&cfg, &points, &cfg.output.directory)?;
            let failed = points.iter().filter(|p| p.outcome.is_err()).count();
            if failed > 0 {
                error!("{failed} of {} map points failed", points.len());
                return Ok(ExitCode::from(4));
            }
        }
        Command::FrozenCore(a) => frozen_core(a, gnuplot)?,
        Command::Oracle(o) => oracle(o, gnuplot)?,
        Command::Fit(a) => {
            let trace = io::read_trace(&a.trace)?;
            let model = match a.model {
                ModelArg::Stretched => DecayModel::Stretched,
                ModelArg::Threshold => DecayModel::Threshold,
            };
            print_fit(&a.trace.display().to_string(), &analysis::fit_t2(&trace, model)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn frozen_core(a: FrozenCore, gnuplot: bool) -> Result<()> {
    let mut model = match &a.model {
        Some(p) => toml::from_str::<PairModel>(&std::fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?,
        None => PairModel::default(),
    };
    if let Some(n) = a.configurations {
        model.configurations = n;
    }
    if let Some(s) = a.seed {
        model.seed = s;
    }
    if !(a.step_nm > 0.0 && a.min_nm > 0.0 && a.max_nm > a.min_nm) {
        return Err(Error::InvalidArgument("need 0 < min_nm < max_nm and step_nm > 0".into()));
    }
    let n = ((a.max_nm - a.min_nm) / a.step_nm).round() as usize;
    let distances: Vec<f64> = (0..=n).map(|k| a.min_nm + k as f64 * a.step_nm).collect();
    let electron = match a.electron {
        ElectronArg::None => None,
        ElectronArg::Ms0 => Some(ElectronState::Ms0),
        ElectronArg::MsM1 => Some(ElectronState::MsM1),
    };
    let rays = ray_grid(a.dtheta_deg, a.dphi_deg);
    let map = frozen_core_scan(electron, &rays, &distances, a.concentration, &model)?;
    std::fs::create_dir_all(&a.output)?;
    let samples: Vec<Vec<String>> = map
        .samples
        .iter()
        .map(|s| {
            vec![
                format!("{}", s.distance_nm),
                format!("{}", s.theta_deg),
                format!("{}", s.phi_deg),
                format!("{}", s.plateau),
                u8::from(s.inside).to_string(),
            ]
        })
        .collect();
    io::write_table_file(&a.output.join("samples.csv"), &["distance_nm", "theta_deg", "phi_deg", "plateau", "inside"], &samples, gnuplot)?;
    let rays: Vec<Vec<String>> = map
        .rays
        .iter()
        .map(|r| {
            vec![
                format!("{}", r.theta_deg),
                format!("{}", r.phi_deg),
                r.r_fc_nm.map_or_else(String::new, |x| format!("{x}")),
                u8::from(r.monotone).to_string(),
            ]
        })
        .collect();
    io::write_table_file(&a.output.join("rays.csv"), &["theta_deg", "phi_deg", "r_fc_nm", "monotone"], &rays, gnuplot)?;
    let mut thetas: Vec<f64> = map.rays.iter().map(|r| r.theta_deg).collect();
    thetas.dedup();
    let profile: Vec<Vec<String>> = thetas
        .iter()
        .map(|&t| vec![format!("{t}"), map.radius_at(t).map_or_else(String::new, |x| format!("{x}"))])
        .collect();
    io::write_table_file(&a.output.join("profile.csv"), &["theta_deg", "r_fc_nm"], &profile, gnuplot)?;
    let volume = map.volume_nm3().ok();
    let count = map.spin_count().ok();
    let mut out = std::io::stdout().lock();
    writeln!(out, "r_fc(180) = {} nm", fmt(map.radius_at(180.0)))?;
    writeln!(out, "r_fc(55) = {} nm", fmt(map.radius_at(55.0)))?;
    writeln!(out, "r_fc(90) = {} nm", fmt(map.radius_at(90.0)))?;
    writeln!(out, "volume = {} nm^3", fmt(volume))?;
    writeln!(out, "spins = {}", fmt(count))?;
    Ok(())
}

fn oracle(o: Oracle, gnuplot: bool) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match o {
        Oracle::TwoSpin { w0_khz, w1_khz, sigma_khz, t_max_ms, points } => {
            let model = TwoSpinModel::new(w0_khz, w1_khz, sigma_khz);
            let trace = oracles::two_spin_trace(&model, &time_grid(t_max_ms, points));
            io::write_trace_to(&trace, &mut out)?;
        }
        Oracle::Exact { config, capacity } => {
            let cfg = RunConfig::load(&config)?;
            let system = SpinSystem::new(pipeline::central_system(&cfg)?, pipeline::bath_configuration(&cfg, 0)?)?;
            let ensemble = match cfg.engine.ensemble {
                EnsembleKind::Thermal => ExactEnsemble::Thermal,
                EnsembleKind::Sampled => ExactEnsemble::Sampled(sample_bath_states(
                    &system.bath,
                    cfg.engine.samples,
                    cfg.engine.seed,
                    cfg.engine.sampling,
                )?),
            };
            let trace = oracles::exact_l(&system, &pipeline::pulse_sequence(&cfg)?, &pipeline::times(&cfg), &ensemble, capacity)?;
            io::write_trace_to(&trace, &mut out)?;
        }
        Oracle::Hybridization { fields_mt, c_ms } => {
            let system = oracles::first_shell_system(0.0);
            let fields: Vec<f64> = fields_mt.iter().map(|b| b * 10.0).collect();
            let rows: Vec<Vec<String>> = oracles::hybridization_t2(&system, &fields, c_ms)?
                .iter()
                .map(|p| {
                    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
                    vec![
                        format!("{}", p.field_gauss / 10.0),
                        cell(p.exact_ms),
                        cell(p.perturbative_ms),
                        cell(p.closed_form_ms),
                        u8::from(p.capped).to_string(),
                    ]
                })
                .collect();
            io::write_table(&mut out, &["field_mT", "exact_ms", "perturbative_ms", "closed_form_ms", "capped"], &rows, gnuplot)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
