//! Spin-bath configurations on the diamond lattice.
//!
//! Crystal frame: positions are generated in the conventional cubic frame
//! and then rotated so that [111] is the z axis. The rotation rows are
//! `x' = (1,1,−2)/√6`, `y' = (−1,1,0)/√2`, `z' = (1,1,1)/√3`.

use std::collections::HashSet;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constants::{self, GAMMA_C13, GAMMA_ELECTRON, NV_ZFS_MHZ};
use crate::couplings::{point_dipole_hyperfine, InteractionTensor};
use crate::error::{Error, Result};
use crate::spin::SpinQuantum;

/// Rotation taking cubic crystal coordinates to the frame with [111] along z.
pub fn cubic_to_111() -> Matrix3<f64> {
    let s6 = 6f64.sqrt();
    let s2 = 2f64.sqrt();
    let s3 = 3f64.sqrt();
    Matrix3::new(
        1.0 / s6, 1.0 / s6, -2.0 / s6,
        -1.0 / s2, 1.0 / s2, 0.0,
        1.0 / s3, 1.0 / s3, 1.0 / s3,
    )
}

/// One nuclear spin of the bath (or the central nucleus).
#[derive(Clone, Debug, PartialEq)]
pub struct BathSpin {
    pub isotope: String,
    /// nm, electron (if any) at the origin.
    pub position: Vector3<f64>,
    /// rad·ms⁻¹·G⁻¹, signed.
    pub gamma: f64,
    pub spin: SpinQuantum,
    /// Hyperfine coupling to the electron, MHz. Computed in the point-dipole
    /// limit when absent.
    pub hyperfine: Option<InteractionTensor<f64>>,
    /// Quadrupole tensor `I·Q·I`, MHz; spin ≥ 1 only.
    pub quadrupole: Option<InteractionTensor<f64>>,
}

impl BathSpin {
    /// Spin of a tabulated isotope.
    pub fn new(isotope: &str, position: Vector3<f64>) -> Result<Self> {
        let (gamma, s) = constants::isotope(isotope)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown isotope '{isotope}'")))?;
        Ok(BathSpin {
            isotope: isotope.to_string(),
            position,
            gamma,
            spin: SpinQuantum::from_f64(s).expect("tabulated spin"),
            hyperfine: None,
            quadrupole: None,
        })
    }

    pub fn carbon(position: Vector3<f64>) -> Self {
        BathSpin {
            isotope: "13C".into(),
            position,
            gamma: GAMMA_C13,
            spin: SpinQuantum::HALF,
            hyperfine: None,
            quadrupole: None,
        }
    }

    pub fn with_hyperfine(mut self, a: InteractionTensor<f64>) -> Self {
        self.hyperfine = Some(a);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.iter().all(|x| x.is_finite()) {
            return Err(Error::Validation(format!("non-finite position for {}", self.isotope)));
        }
        if self.spin.twice() == 0 {
            return Err(Error::Validation(format!("{} has zero spin", self.isotope)));
        }
        if let Some(a) = &self.hyperfine {
            if !a.is_symmetric(1e-12) {
                return Err(Error::Validation(format!(
                    "hyperfine tensor of {} at {:?} is not symmetric",
                    self.isotope, self.position
                )));
            }
        }
        if self.quadrupole.is_some() && self.spin.twice() < 2 {
            return Err(Error::Validation(format!("quadrupole tensor on spin-1/2 {}", self.isotope)));
        }
        Ok(())
    }

    /// Hyperfine tensor to an electron at the origin with gyromagnetic ratio
    /// `gamma_e`: the stored one, else the point-dipole value.
    pub fn hyperfine_or_point_dipole(&self, gamma_e: f64) -> Result<InteractionTensor<f64>> {
        match &self.hyperfine {
            Some(a) => Ok(*a),
            None => point_dipole_hyperfine(&self.position, self.gamma, gamma_e),
        }
    }
}

/// Fixed spins around which random spins were cleared.
#[derive(Clone, Debug, PartialEq)]
pub struct Exclusion {
    pub positions: Vec<Vector3<f64>>,
    pub cutoff_nm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BathConfiguration {
    pub spins: Vec<BathSpin>,
    pub seed: u64,
    pub abundance: f64,
    pub lattice_extent: Vector3<f64>,
    pub exclusion: Option<Exclusion>,
}

fn position_key(p: &Vector3<f64>) -> [i64; 3] {
    // 1e-6 nm resolution
    [(p.x * 1e6).round() as i64, (p.y * 1e6).round() as i64, (p.z * 1e6).round() as i64]
}

impl BathConfiguration {
    pub fn from_spins(spins: Vec<BathSpin>) -> Result<Self> {
        let c = BathConfiguration {
            spins,
            seed: 0,
            abundance: 0.0,
            lattice_extent: Vector3::zeros(),
            exclusion: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn empty() -> Self {
        BathConfiguration {
            spins: Vec::new(),
            seed: 0,
            abundance: 0.0,
            lattice_extent: Vector3::zeros(),
            exclusion: None,
        }
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.spins.len());
        for s in &self.spins {
            s.validate()?;
            if !seen.insert(position_key(&s.position)) {
                return Err(Error::Validation(format!("duplicate spin position {:?}", s.position)));
            }
        }
        Ok(())
    }

    /// Keeps spins with `|r − centre| ≤ radius`.
    pub fn within_sphere(&self, centre: &Vector3<f64>, radius: f64) -> Self {
        let mut c = self.clone();
        c.spins.retain(|s| (s.position - centre).norm() <= radius);
        c
    }

    /// Drops spins closer than `tol` to any of `points`.
    pub fn without_near(&self, points: &[Vector3<f64>], tol: f64) -> Self {
        let mut c = self.clone();
        c.spins.retain(|s| points.iter().all(|p| (s.position - p).norm() > tol));
        c
    }

    /// Spins sorted by distance to `centre` (stable for ties).
    pub fn sorted_by_distance(&self, centre: &Vector3<f64>) -> Self {
        let mut c = self.clone();
        c.spins.sort_by(|a, b| {
            (a.position - centre)
                .norm()
                .partial_cmp(&(b.position - centre).norm())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        c
    }
}

/// All diamond sites inside the box `[−e/2, e/2)` (cubic frame, centred on a
/// lattice site at the origin), rotated to the [111]→z frame.
pub fn generate_lattice(extent: Vector3<f64>, lattice_constant: f64) -> Result<Vec<Vector3<f64>>> {
    if extent.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument(format!("lattice extent must be positive, got {extent:?}")));
    }
    if !(lattice_constant > 0.0) {
        return Err(Error::InvalidArgument(format!("lattice constant must be positive, got {lattice_constant}")));
    }
    const BASIS: [[f64; 3]; 8] = [
        [0.0, 0.0, 0.0],
        [0.0, 0.5, 0.5],
        [0.5, 0.0, 0.5],
        [0.5, 0.5, 0.0],
        [0.25, 0.25, 0.25],
        [0.25, 0.75, 0.75],
        [0.75, 0.25, 0.75],
        [0.75, 0.75, 0.25],
    ];
    let rot = cubic_to_111();
    let half = extent / 2.0;
    let lo: Vec<i64> = (0..3).map(|k| (-half[k] / lattice_constant).floor() as i64 - 1).collect();
    let hi: Vec<i64> = (0..3).map(|k| (half[k] / lattice_constant).ceil() as i64 + 1).collect();
    let mut sites = Vec::new();
    for i in lo[0]..=hi[0] {
        for j in lo[1]..=hi[1] {
            for k in lo[2]..=hi[2] {
                for b in &BASIS {
                    let p = Vector3::new(i as f64 + b[0], j as f64 + b[1], k as f64 + b[2]) * lattice_constant;
                    if (0..3).all(|d| p[d] >= -half[d] && p[d] < half[d]) {
                        sites.push(rot * p);
                    }
                }
            }
        }
    }
    Ok(sites)
}

/// Occupies each site independently with `isotope` with probability
/// `abundance`, using a ChaCha8 stream seeded by `seed`.
pub fn sample_isotopes(
    sites: &[Vector3<f64>],
    abundance: f64,
    seed: u64,
    isotope: &str,
) -> Result<BathConfiguration> {
    if !(0.0..=1.0).contains(&abundance) {
        return Err(Error::InvalidArgument(format!("abundance {abundance} outside [0, 1]")));
    }
    let template = BathSpin::new(isotope, Vector3::zeros())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spins = Vec::new();
    for p in sites {
        if rng.random::<f64>() < abundance {
            let mut s = template.clone();
            s.position = *p;
            spins.push(s);
        }
    }
    let mut extent = Vector3::zeros();
    for p in sites {
        for d in 0..3 {
            extent[d] = f64::max(extent[d], 2.0 * p[d].abs());
        }
    }
    Ok(BathConfiguration { spins, seed, abundance, lattice_extent: extent, exclusion: None })
}

/// Removes random spins closer than `cutoff` to any fixed spin (coincident
/// spins always), then appends the fixed spins. Returns the number removed.
pub fn apply_exclusion(
    config: &BathConfiguration,
    fixed: &[BathSpin],
    cutoff_nm: f64,
) -> Result<(BathConfiguration, usize)> {
    if !(cutoff_nm >= 0.0) {
        return Err(Error::InvalidArgument(format!("cutoff must be non-negative, got {cutoff_nm}")));
    }
    let centres: Vec<Vector3<f64>> = fixed.iter().map(|s| s.position).collect();
    let before = config.spins.len();
    let mut out = config.clone();
    out.spins.retain(|s| {
        centres.iter().all(|c| {
            let d = (s.position - c).norm();
            d >= cutoff_nm && position_key(&s.position) != position_key(c)
        })
    });
    let removed = before - out.spins.len();
    out.spins.extend(fixed.iter().cloned());
    out.exclusion = Some(Exclusion { positions: centres, cutoff_nm });
    Ok((out, removed))
}

/// Initial state of the bath: a product of `I_z` eigenstates (one
/// projection per spin) or the infinite-temperature mixture.
#[derive(Clone, Debug, PartialEq)]
pub enum BathState {
    Thermal,
    Product(Vec<f64>),
}

impl BathState {
    pub fn validate(&self, bath: &BathConfiguration) -> Result<()> {
        if let BathState::Product(m) = self {
            if m.len() != bath.len() {
                return Err(Error::Validation(format!("bath state has {} projections for {} spins", m.len(), bath.len())));
            }
            for (s, &mi) in bath.spins.iter().zip(m) {
                if s.spin.index_of(mi).is_none() {
                    return Err(Error::Validation(format!("projection {mi} invalid for spin {}", s.spin)));
                }
            }
        }
        Ok(())
    }

    /// Product-basis index of the restriction to `indices` (sites in that
    /// order, most significant first). `None` for the thermal state.
    pub fn basis_index(&self, bath: &BathConfiguration, indices: &[usize]) -> Option<usize> {
        match self {
            BathState::Thermal => None,
            BathState::Product(m) => Some(indices.iter().fold(0, |acc, &i| {
                let s = bath.spins[i].spin;
                acc * s.dim() + s.index_of(m[i]).expect("validated projection")
            })),
        }
    }
}

/// Electron spin of a defect centre, placed at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Electron {
    pub spin: SpinQuantum,
    /// rad·ms⁻¹·G⁻¹, signed.
    pub gamma: f64,
    /// Zero-field splitting `D`, MHz, entering as `D·S_z²`.
    pub zfs_mhz: f64,
    pub hyperfine_to_central: InteractionTensor<f64>,
}

impl Electron {
    pub fn nv(hyperfine_to_central: InteractionTensor<f64>) -> Self {
        Electron { spin: SpinQuantum::ONE, gamma: GAMMA_ELECTRON, zfs_mhz: NV_ZFS_MHZ, hyperfine_to_central }
    }
}

/// Initial electron manifold; electron π pulses in a sequence toggle
/// `m_s = 0 ↔ m_s = −1` from here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElectronState {
    Ms0,
    MsM1,
    MsP1,
}

impl ElectronState {
    pub fn projection(self) -> f64 {
        match self {
            ElectronState::Ms0 => 0.0,
            ElectronState::MsM1 => -1.0,
            ElectronState::MsP1 => 1.0,
        }
    }

    /// Target of an electron π pulse.
    pub fn flipped(self) -> ElectronState {
        match self {
            ElectronState::Ms0 => ElectronState::MsM1,
            ElectronState::MsM1 => ElectronState::Ms0,
            ElectronState::MsP1 => ElectronState::MsP1,
        }
    }
}

impl std::str::FromStr for ElectronState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ms0" | "0" => Ok(ElectronState::Ms0),
            "msM1" | "ms-1" | "-1" => Ok(ElectronState::MsM1),
            "msP1" | "ms+1" | "+1" | "1" => Ok(ElectronState::MsP1),
            _ => Err(Error::InvalidArgument(format!("unknown electron state '{s}'"))),
        }
    }
}

impl std::fmt::Display for ElectronState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ElectronState::Ms0 => "ms0",
            ElectronState::MsM1 => "msM1",
            ElectronState::MsP1 => "msP1",
        })
    }
}

/// Central nucleus (the qubit), optional electron, and field.
#[derive(Clone, Debug, PartialEq)]
pub struct CentralSystem {
    pub central: BathSpin,
    pub electron: Option<Electron>,
    /// Magnetic field, G.
    pub field_gauss: Vector3<f64>,
    pub electron_state: ElectronState,
    /// Nuclear projections `(m_a, m_b)` defining the qubit levels.
    pub qubit_projections: (f64, f64),
}

impl CentralSystem {
    /// Central nucleus without electron, field along z.
    pub fn bare(central: BathSpin, field_gauss: f64) -> Self {
        let s = central.spin.value();
        CentralSystem {
            central,
            electron: None,
            field_gauss: Vector3::new(0.0, 0.0, field_gauss),
            electron_state: ElectronState::Ms0,
            qubit_projections: (s, s - 1.0),
        }
    }

    /// NV centre with a nucleus at `central.position`; the central hyperfine
    /// is the nucleus' own tensor or its point-dipole value.
    pub fn nv(central: BathSpin, field_gauss: f64, state: ElectronState) -> Result<Self> {
        let a = central.hyperfine_or_point_dipole(GAMMA_ELECTRON)?;
        let s = central.spin.value();
        Ok(CentralSystem {
            central,
            electron: Some(Electron::nv(a)),
            field_gauss: Vector3::new(0.0, 0.0, field_gauss),
            electron_state: state,
            qubit_projections: (s, s - 1.0),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.central.validate()?;
        if self.electron.is_none() && self.electron_state != ElectronState::Ms0 {
            return Err(Error::Validation("electron state set without an electron".into()));
        }
        if let Some(e) = &self.electron {
            if !(e.zfs_mhz >= 0.0) {
                return Err(Error::Validation(format!("zero-field splitting must be ≥ 0, got {}", e.zfs_mhz)));
            }
            if e.spin.index_of(self.electron_state.projection()).is_none() {
                return Err(Error::Validation(format!("electron spin {} has no {} level", e.spin, self.electron_state)));
            }
        }
        let (a, b) = self.qubit_projections;
        if a == b || self.central.spin.index_of(a).is_none() || self.central.spin.index_of(b).is_none() {
            return Err(Error::Validation(format!("invalid qubit projections ({a}, {b})")));
        }
        Ok(())
    }

    pub fn gamma_e(&self) -> f64 {
        self.electron.as_ref().map_or(GAMMA_ELECTRON, |e| e.gamma)
    }
}
