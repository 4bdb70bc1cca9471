//! Post-processing: T2 extraction, ensemble statistics, the frozen-core pair
//! model and concentration scaling.

use std::f64::consts::{E, PI};

use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::{generate_lattice, sample_isotopes, BathConfiguration, BathSpin};
use crate::constants::{gamma_field_mhz, DIAMOND_LATTICE_NM, GAMMA_ELECTRON, MHZ_MS, NATURAL_C13_ABUNDANCE};
use crate::couplings::{dipolar_tensor, flip_flop_amplitude, point_dipole_hyperfine};
use crate::error::{Error, Result};
use crate::propagation::CoherenceTrace;
use crate::C64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayModel {
    /// `|L| = exp[−(t/T2)ⁿ]`, `n ∈ [0.5, 4]`.
    Stretched,
    /// First interpolated crossing of `1/e`.
    Threshold,
}

pub const EXPONENT_RANGE: (f64, f64) = (0.5, 4.0);

/// Samples after `|L|` first drops below this are left out of the stretched fit.
pub const FIT_FLOOR: f64 = 0.05;
/// Stretched fits beyond this multiple of the grid end are discarded.
pub const STRETCHED_REACH: f64 = 10.0;
/// The stretched T2 is the headline value only within this factor of the
/// 1/e crossing; otherwise the crossing is.
pub const STRETCHED_AGREEMENT: f64 = 2.0;

/// Both estimators; `t2_ms` is the one requested, `None` when unresolved.
/// A stretched fit that disagrees badly with the crossing (a trace with
/// revivals, say) yields the crossing as `t2_ms`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct T2Fit {
    pub t2_ms: Option<f64>,
    pub stretched_ms: Option<f64>,
    pub exponent: Option<f64>,
    /// RMS residual of the stretched fit.
    pub residual: Option<f64>,
    pub threshold_ms: Option<f64>,
    /// Grid end when `|L|` never reaches `1/e`.
    pub lower_bound_ms: Option<f64>,
}

impl T2Fit {
    pub fn resolved(&self) -> bool {
        self.lower_bound_ms.is_none()
    }

    /// Headline value, or the lower bound when unresolved.
    pub fn value_or_bound(&self) -> f64 {
        self.t2_ms.or(self.lower_bound_ms).unwrap_or(f64::NAN)
    }
}

/// Linear interpolation of the first downward crossing of `level`.
pub fn first_crossing(times: &[f64], y: &[f64], level: f64) -> Option<f64> {
    for k in 1..y.len() {
        if y[k] < level && y[k - 1] >= level {
            let f = (y[k - 1] - level) / (y[k - 1] - y[k]);
            return Some(times[k - 1] + f * (times[k] - times[k - 1]));
        }
    }
    None
}

fn model_value(t: f64, t2: f64, n: f64) -> f64 {
    (-(t / t2).powf(n)).exp()
}

/// Least-squares stretched exponential, Levenberg–Marquardt on `(ln T2, n)`.
pub fn fit_stretched(times: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let pts: Vec<(f64, f64)> = times.iter().zip(y).filter(|(t, _)| **t > 0.0).map(|(t, v)| (*t, *v)).collect();
    if pts.len() < 2 {
        return None;
    }
    // start from the linearized form ln(−ln y) = n ln t − n ln T2
    let lin: Vec<(f64, f64)> = pts
        .iter()
        .filter(|(_, v)| *v > 0.02 && *v < 0.98)
        .map(|(t, v)| (t.ln(), (-v.ln()).ln()))
        .collect();
    let (lo, hi) = EXPONENT_RANGE;
    let (mut u, mut n) = if lin.len() >= 2 {
        let m = lin.len() as f64;
        let (sx, sy) = lin.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (mx, my) = (sx / m, sy / m);
        let sxx: f64 = lin.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = lin.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 2.0 };
        let n0 = slope.clamp(lo, hi);
        (mx - my / n0, n0)
    } else {
        let t2 = first_crossing(times, y, 1.0 / E).unwrap_or(*times.last()?);
        (t2.ln(), 2.0)
    };
    let cost = |u: f64, n: f64| pts.iter().map(|(t, v)| (model_value(*t, u.exp(), n) - v).powi(2)).sum::<f64>();
    let mut c = cost(u, n);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let mut jtj = Matrix2::<f64>::zeros();
        let mut jtr = nalgebra::Vector2::<f64>::zeros();
        for (t, v) in &pts {
            let x = (t.ln() - u) * n;
            let p = x.exp();
            let m = (-p).exp();
            let r = m - v;
            // ∂m/∂u = m·p·n, ∂m/∂n = −m·p·(ln t − u)
            let j = nalgebra::Vector2::new(m * p * n, -m * p * (t.ln() - u));
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        for _ in 0..20 {
            let a = jtj + Matrix2::from_diagonal(&jtj.diagonal()) * lambda + Matrix2::identity() * 1e-30;
            let Some(step) = a.lu().solve(&(-jtr)) else { break };
            let (u1, n1) = (u + step[0], (n + step[1]).clamp(lo, hi));
            let c1 = cost(u1, n1);
            if c1 < c {
                let done = (c - c1) <= 1e-15 * c.max(1e-300) || step.norm() < 1e-14;
                u = u1;
                n = n1;
                c = c1;
                lambda = (lambda * 0.3).max(1e-12);
                improved = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Some((u.exp(), n, (c / pts.len() as f64).sqrt()))
}

/// T2 from `|L(t)|`.
pub fn fit_t2(trace: &CoherenceTrace, model: DecayModel) -> Result<T2Fit> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("empty trace".into()));
    }
    let y = trace.abs();
    let threshold = first_crossing(&trace.times, &y, 1.0 / E);
    // the decay window: revivals and noise after |L| first reaches the floor
    // would otherwise dominate the fit
    let end = y.iter().position(|v| *v < FIT_FLOOR).map_or(y.len(), |k| k + 1);
    let grid_end = trace.times.last().copied().unwrap_or(0.0);
    let stretched = fit_stretched(&trace.times[..end], &y[..end])
        .filter(|s| s.0.is_finite() && s.0 <= STRETCHED_REACH * grid_end.max(f64::MIN_POSITIVE));
    let lower = if threshold.is_none() { Some(grid_end) } else { None };
    let t2 = match (lower, model) {
        (Some(_), _) => None,
        (None, DecayModel::Stretched) => match (stretched, threshold) {
            (Some(s), Some(th)) if (s.0 / th).ln().abs() <= STRETCHED_AGREEMENT.ln() => Some(s.0),
            _ => threshold,
        },
        (None, DecayModel::Threshold) => threshold,
    };
    Ok(T2Fit {
        t2_ms: t2,
        stretched_ms: stretched.map(|s| s.0),
        exponent: stretched.map(|s| s.1),
        residual: stretched.map(|s| s.2),
        threshold_ms: threshold,
        lower_bound_ms: lower,
    })
}

#[derive(Clone, Debug)]
pub struct EnsembleAverage {
    pub mean: CoherenceTrace,
    pub fit: T2Fit,
    /// Per-configuration fits, in input order.
    pub individual: Vec<T2Fit>,
}

/// Pointwise mean of complex `L` across configurations, with every T2.
pub fn ensemble_average(traces: &[CoherenceTrace], model: DecayModel) -> Result<EnsembleAverage> {
    let first = traces.first().ok_or_else(|| Error::InvalidArgument("no traces to average".into()))?;
    for t in traces {
        if t.times != first.times {
            return Err(Error::Validation("traces are on different time grids".into()));
        }
    }
    let n = traces.len() as f64;
    let values: Vec<C64> =
        (0..first.len()).map(|k| traces.iter().map(|t| t.values[k]).sum::<C64>() / n).collect();
    let mean = CoherenceTrace::new(first.times.clone(), values)?
        .with_metadata_map(first.metadata.clone())
        .with_meta("configurations", traces.len());
    let fit = fit_t2(&mean, model)?;
    let individual = traces.iter().map(|t| fit_t2(t, model)).collect::<Result<_>>()?;
    Ok(EnsembleAverage { mean, fit, individual })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScalingFit {
    pub amplitude: f64,
    pub exponent: f64,
    /// Coefficient of determination in log space.
    pub r_squared: f64,
}

/// Power law `y = A xᵏ` by least squares in log–log space.
pub fn scaling_fit(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 4 {
        return Err(Error::Validation(format!("scaling fit needs at least 4 points, got {}", points.len())));
    }
    if points.iter().any(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::Validation("scaling fit needs positive values".into()));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Validation("scaling fit needs distinct abscissae".into()));
    }
    let k = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(ScalingFit { amplitude: (my - k * mx).exp(), exponent: k, r_squared })
}

/// Spin-pair model used to map the frozen core.
///
/// Each bath pair within `pair_cutoff_nm` whose spins both lie within
/// `bath_radius_nm` of the probe contributes its CCE2 Hahn-echo factor; the
/// radii are given at `reference_concentration` and scale as `c^(−1/3)` so
/// the pair count stays fixed across concentrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairModel {
    pub bath_radius_nm: f64,
    pub pair_cutoff_nm: f64,
    pub reference_concentration: f64,
    /// Bath spins closer than this to the probe or to the defect are dropped.
    pub exclusion_nm: f64,
    pub field_gauss: f64,
    pub configurations: usize,
    pub seed: u64,
}

impl Default for PairModel {
    fn default() -> Self {
        PairModel {
            bath_radius_nm: 3.0,
            pair_cutoff_nm: 1.5,
            reference_concentration: NATURAL_C13_ABUNDANCE,
            exclusion_nm: 0.2,
            field_gauss: 500.0,
            configurations: 8,
            seed: 1,
        }
    }
}

impl PairModel {
    pub fn radii(&self, concentration: f64) -> (f64, f64) {
        let s = (self.reference_concentration / concentration).cbrt();
        (self.bath_radius_nm * s, self.pair_cutoff_nm * s)
    }

    fn validate(&self, concentration: f64) -> Result<()> {
        if !(concentration > 0.0 && concentration <= 1.0) {
            return Err(Error::Validation(format!("concentration {concentration} outside (0, 1]")));
        }
        if !(self.bath_radius_nm > 0.0 && self.pair_cutoff_nm > 0.0 && self.reference_concentration > 0.0) {
            return Err(Error::Validation("pair model radii and reference concentration must be positive".into()));
        }
        if self.configurations == 0 {
            return Err(Error::Validation("pair model needs at least one configuration".into()));
        }
        Ok(())
    }
}

/// Precomputed single-spin and pair quantities of one bath realization.
struct PairBath {
    positions: Vec<Vector3<f64>>,
    gammas: Vec<f64>,
    /// Local precession frequency per electron projection `[0, −1]`, MHz.
    local: Vec<[f64; 2]>,
    pairs: Vec<(usize, usize, f64)>,
    /// Pairs bucketed by the cell of their first spin.
    grid: std::collections::HashMap<[i64; 3], Vec<usize>>,
    cell: f64,
}

impl PairBath {
    fn new(bath: &BathConfiguration, field_gauss: f64, pair_cutoff: f64, cell: f64) -> Result<Self> {
        let positions: Vec<Vector3<f64>> = bath.spins.iter().map(|s| s.position).collect();
        let gammas: Vec<f64> = bath.spins.iter().map(|s| s.gamma).collect();
        let mut local = Vec::with_capacity(positions.len());
        for s in &bath.spins {
            let a = point_dipole_hyperfine(&s.position, s.gamma, GAMMA_ELECTRON)?;
            let z = Vector3::new(0.0, 0.0, -gamma_field_mhz(s.gamma, field_gauss));
            // m_s A_z· adds to the Zeeman vector
            let row = Vector3::new(a.get(2, 0), a.get(2, 1), a.get(2, 2));
            let f = z - row;
            local.push([z.norm() * z.z.signum(), f.norm() * f.z.signum()]);
        }
        let key = |p: &Vector3<f64>, c: f64| [(p.x / c).floor() as i64, (p.y / c).floor() as i64, (p.z / c).floor() as i64];
        let mut spin_cells: std::collections::HashMap<[i64; 3], Vec<usize>> = Default::default();
        for (i, p) in positions.iter().enumerate() {
            spin_cells.entry(key(p, pair_cutoff)).or_default().push(i);
        }
        let mut pairs = Vec::new();
        for (i, p) in positions.iter().enumerate() {
            let k = key(p, pair_cutoff);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(v) = spin_cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            for &j in v {
                                if j > i && (positions[j] - p).norm() <= pair_cutoff {
                                    let t = dipolar_tensor(p, &positions[j], gammas[i], gammas[j])?;
                                    pairs.push((i, j, flip_flop_amplitude(&t) / 2.0));
                                }
                            }
                        }
                    }
                }
            }
        }
        pairs.sort_by_key(|a| (a.0, a.1));
        let mut grid: std::collections::HashMap<[i64; 3], Vec<usize>> = Default::default();
        for (k, &(i, _, _)) in pairs.iter().enumerate() {
            grid.entry(key(&positions[i], cell)).or_default().push(k);
        }
        Ok(PairBath { positions, gammas, local, pairs, grid, cell })
    }

    /// Pairs whose spins lie within `radius` of `probe` and outside `exclusion`.
    fn pairs_near(&self, probe: &Vector3<f64>, radius: f64, exclusion: f64) -> Vec<usize> {
        let c = self.cell;
        let k = [(probe.x / c).floor() as i64, (probe.y / c).floor() as i64, (probe.z / c).floor() as i64];
        let reach = (radius / c).ceil() as i64;
        let ok = |i: usize| {
            let d = (self.positions[i] - probe).norm();
            d <= radius && d >= exclusion
        };
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(v) = self.grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(v.iter().copied().filter(|&p| ok(self.pairs[p].0) && ok(self.pairs[p].1)));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Pseudo-spin Hamiltonians `h_α = (Δ_α/2)τ_z + c τ_x` of a pair for the two
/// probe states, `α = ±1/2`.
fn pair_detunings(pb: &PairBath, probe: &Vector3<f64>, probe_gamma: f64, ms: usize, pair: usize) -> (f64, f64, f64) {
    let (i, j, c) = pb.pairs[pair];
    let zz = |k: usize| {
        dipolar_tensor(probe, &pb.positions[k], probe_gamma, pb.gammas[k]).map(|t| t.zz()).unwrap_or(0.0)
    };
    let base = pb.local[i][ms] - pb.local[j][ms];
    let delta = zz(i) - zz(j);
    (base + 0.5 * delta, base - 0.5 * delta, c)
}

/// Frequency differences below this (MHz) do not dephase by `t = 10⁶ ms`.
const RESONANCE_MHZ: f64 = 1.0 / (1e6 * MHZ_MS);

/// Spectral projectors and eigenvalues `±ω/2` of `(Δ/2)τ_z + c τ_x`.
fn projectors(delta: f64, c: f64) -> [(f64, Matrix2<f64>); 2] {
    let w = (delta * delta + 4.0 * c * c).sqrt();
    let (nz, nx) = if w > 0.0 { (delta / w, 2.0 * c / w) } else { (1.0, 0.0) };
    let n = Matrix2::new(nz, nx, nx, -nz);
    let id = Matrix2::identity();
    [(w / 2.0, (id + n) / 2.0), (-w / 2.0, (id - n) / 2.0)]
}

/// Long-time average of one pair's thermal Hahn-echo factor.
///
/// Expanding `e^{ih_aτ}e^{ih_bτ}e^{−ih_aτ}e^{−ih_bτ}` in spectral projectors,
/// only terms whose frequencies cancel survive; away from resonances this is
/// `1 − sin²(θ_a − θ_b)/4` with `tan θ_α = 2c/Δ_α`.
pub fn pair_plateau(delta_a: f64, delta_b: f64, c: f64) -> f64 {
    let pa = projectors(delta_a, c);
    let pb = projectors(delta_b, c);
    let mut avg = 0.0;
    for (l1, p1) in &pa {
        for (m1, q1) in &pb {
            for (l2, p2) in &pa {
                for (m2, q2) in &pb {
                    if (l1 + m1 - l2 - m2).abs() < RESONANCE_MHZ {
                        avg += (p1 * q1 * p2 * q2).trace();
                    }
                }
            }
        }
    }
    0.5 * (1.0 + 0.5 * avg)
}

fn su2(delta: f64, c: f64, tau_ms: f64) -> Matrix2<C64> {
    let w = (delta * delta + 4.0 * c * c).sqrt();
    let phi = PI * w * tau_ms * MHZ_MS;
    let (s, co) = phi.sin_cos();
    if w == 0.0 {
        return Matrix2::identity();
    }
    let (nz, nx) = (delta / w, 2.0 * c / w);
    let i = C64::new(0.0, 1.0);
    Matrix2::new(co - i * s * nz, -i * s * nx, -i * s * nx, co + i * s * nz)
}

/// One pair's thermal Hahn-echo factor at total time `t = 2τ`.
pub fn pair_echo(delta_a: f64, delta_b: f64, c: f64, t_ms: f64) -> C64 {
    let tau = t_ms / 2.0;
    let (ua, ub) = (su2(delta_a, c, tau), su2(delta_b, c, tau));
    let m = ua.adjoint() * ub.adjoint() * ua * ub;
    (C64::new(1.0, 0.0) + m.trace() / 2.0) / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrozenCoreSample {
    pub distance_nm: f64,
    pub theta_deg: f64,
    pub phi_deg: f64,
    /// Configuration-averaged long-time `|L|`.
    pub plateau: f64,
    pub inside: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RayFrozenCore {
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub r_fc_nm: Option<f64>,
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrozenCoreMap {
    pub samples: Vec<FrozenCoreSample>,
    pub rays: Vec<RayFrozenCore>,
    pub concentration: f64,
}

pub fn direction(theta_deg: f64, phi_deg: f64) -> Vector3<f64> {
    let (t, p) = (theta_deg.to_radians(), phi_deg.to_radians());
    Vector3::new(t.sin() * p.cos(), t.sin() * p.sin(), t.cos())
}

/// Electron projection used by the pair model: `None` for no electron.
pub type ElectronProjection = Option<crate::bath::ElectronState>;

/// Long-time pair-model coherence along rays from the defect.
///
/// `distances` must be increasing; `r_fc` per ray is the first interpolated
/// crossing of `1/e`, with `monotone = false` flagging rays where the plateau
/// rises again past a crossing.
pub fn frozen_core_scan(
    electron: ElectronProjection,
    rays: &[(f64, f64)],
    distances: &[f64],
    concentration: f64,
    model: &PairModel,
) -> Result<FrozenCoreMap> {
    model.validate(concentration)?;
    if distances.windows(2).any(|w| w[1] <= w[0]) || distances.iter().any(|d| *d <= 0.0) {
        return Err(Error::Validation("distances must be positive and increasing".into()));
    }
    let ms = match electron {
        None | Some(crate::bath::ElectronState::Ms0) => 0,
        Some(crate::bath::ElectronState::MsM1) => 1,
        Some(crate::bath::ElectronState::MsP1) => {
            return Err(Error::InvalidArgument("pair model supports m_s = 0 and −1".into()));
        }
    };
    let (radius, cutoff) = model.radii(concentration);
    let reach = distances.last().copied().unwrap_or(0.0) + radius + cutoff;
    let extent = Vector3::repeat(2.0 * reach + DIAMOND_LATTICE_NM);
    let sites: Vec<Vector3<f64>> = generate_lattice(extent, DIAMOND_LATTICE_NM)?
        .into_iter()
        .filter(|p| p.norm() <= reach && p.norm() >= model.exclusion_nm)
        .collect();
    let probe_gamma = crate::constants::GAMMA_C13;
    let mut sums = vec![0.0; rays.len() * distances.len()];
    for k in 0..model.configurations {
        let bath = sample_isotopes(&sites, concentration, model.seed.wrapping_add(k as u64), "13C")?;
        let pb = PairBath::new(&bath, model.field_gauss, cutoff, radius.max(cutoff))?;
        let vals: Vec<f64> = rays
            .par_iter()
            .flat_map_iter(|&(theta, phi)| {
                let dir = direction(theta, phi);
                let pb = &pb;
                distances.iter().map(move |&d| {
                    let probe = dir * d;
                    pb.pairs_near(&probe, radius, model.exclusion_nm)
                        .into_iter()
                        .map(|p| {
                            let (da, db, c) = pair_detunings(pb, &probe, probe_gamma, ms, p);
                            pair_plateau(da, db, c)
                        })
                        .product::<f64>()
                })
            })
            .collect();
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v;
        }
    }
    let n = model.configurations as f64;
    let mut samples = Vec::with_capacity(sums.len());
    let mut out_rays = Vec::with_capacity(rays.len());
    for (r, &(theta, phi)) in rays.iter().enumerate() {
        let plateau: Vec<f64> = (0..distances.len()).map(|k| sums[r * distances.len() + k] / n).collect();
        let r_fc = first_crossing(distances, &plateau, 1.0 / E);
        let monotone = match r_fc {
            Some(rc) => distances.iter().zip(&plateau).all(|(d, p)| *d <= rc || *p < 1.0 / E),
            None => true,
        };
        if !monotone {
            log::warn!("frozen-core plateau is not monotone along Θ={theta}°, φ={phi}°");
        }
        for (d, p) in distances.iter().zip(&plateau) {
            samples.push(FrozenCoreSample {
                distance_nm: *d,
                theta_deg: theta,
                phi_deg: phi,
                plateau: *p,
                inside: *p >= 1.0 / E,
            });
        }
        out_rays.push(RayFrozenCore { theta_deg: theta, phi_deg: phi, r_fc_nm: r_fc, monotone });
    }
    Ok(FrozenCoreMap { samples, rays: out_rays, concentration })
}

/// Rays on the product grid `Θ = 0..=180` step `dtheta`, `φ = 0..360` step `dphi`.
pub fn ray_grid(dtheta_deg: f64, dphi_deg: f64) -> Vec<(f64, f64)> {
    let nt = (180.0 / dtheta_deg).round() as usize;
    let np = (360.0 / dphi_deg).round() as usize;
    (0..=nt).flat_map(|i| (0..np).map(move |j| (i as f64 * dtheta_deg, j as f64 * dphi_deg))).collect()
}

impl FrozenCoreMap {
    /// `∫ r_fc³/3 dΩ` over a product grid of rays (trapezoid in Θ, mean over φ).
    pub fn volume_nm3(&self) -> Result<f64> {
        let mut thetas: Vec<f64> = self.rays.iter().map(|r| r.theta_deg).collect();
        thetas.sort_by(f64::total_cmp);
        thetas.dedup();
        if thetas.len() < 2 {
            return Err(Error::Validation("volume needs at least two polar angles".into()));
        }
        let mut cube = Vec::with_capacity(thetas.len());
        for &t in &thetas {
            let rs: Vec<f64> = self.rays.iter().filter(|r| r.theta_deg == t).map(|r| r.r_fc_nm.unwrap_or(0.0)).collect();
            cube.push(rs.iter().map(|r| r.powi(3)).sum::<f64>() / rs.len() as f64);
        }
        let mut v = 0.0;
        for k in 1..thetas.len() {
            let (t0, t1) = (thetas[k - 1].to_radians(), thetas[k].to_radians());
            v += 0.5 * (cube[k - 1] * t0.sin() + cube[k] * t1.sin()) * (t1 - t0);
        }
        Ok(2.0 * PI * v / 3.0)
    }

    /// Expected number of bath nuclei inside the core.
    pub fn spin_count(&self) -> Result<f64> {
        Ok(self.volume_nm3()? * self.concentration * 8.0 / DIAMOND_LATTICE_NM.powi(3))
    }

    /// `r_fc` at polar angle `theta_deg` from the plateau averaged over all
    /// azimuths scanned at that angle.
    pub fn radius_at(&self, theta_deg: f64) -> Option<f64> {
        let at: Vec<&FrozenCoreSample> =
            self.samples.iter().filter(|s| (s.theta_deg - theta_deg).abs() < 1e-9).collect();
        let mut distances: Vec<f64> = at.iter().map(|s| s.distance_nm).collect();
        distances.sort_by(f64::total_cmp);
        distances.dedup();
        let plateau: Vec<f64> = distances
            .iter()
            .map(|d| {
                let v: Vec<f64> = at.iter().filter(|s| s.distance_nm == *d).map(|s| s.plateau).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        first_crossing(&distances, &plateau, 1.0 / E)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationStep {
    pub bath_radius_nm: f64,
    pub pair_cutoff_nm: f64,
    pub mean_pairs: f64,
    pub t2_ms: Option<f64>,
}

/// Electron-free convergence of the pair model.
///
/// Scales both radii of `base` by each factor in `scales` and fits the
/// ensemble Hahn-echo T2 of a probe at the defect position with the
/// electron removed; returns the first step whose T2 differs from the next
/// by less than `tolerance`, with the whole table.
pub fn calibrate_pair_model(
    base: &PairModel,
    concentration: f64,
    scales: &[f64],
    times: &[f64],
    tolerance: f64,
) -> Result<(PairModel, Vec<CalibrationStep>)> {
    base.validate(concentration)?;
    let mut steps = Vec::with_capacity(scales.len());
    for &s in scales {
        let model = PairModel { bath_radius_nm: base.bath_radius_nm * s, pair_cutoff_nm: base.pair_cutoff_nm * s, ..base.clone() };
        let (radius, cutoff) = model.radii(concentration);
        let traces = (0..base.configurations)
            .into_par_iter()
            .map(|k| {
                let bath = pair_model_bath(concentration, radius + cutoff + 0.5, base.seed.wrapping_add(k as u64), base.exclusion_nm)?;
                pair_model_echo(None, &Vector3::zeros(), &bath, &model, concentration, times)
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_pairs = traces.iter().map(|t| t.metadata["pairs"].parse::<f64>().unwrap_or(0.0)).sum::<f64>()
            / traces.len() as f64;
        let fit = ensemble_average(&traces, DecayModel::Stretched)?.fit;
        steps.push(CalibrationStep { bath_radius_nm: model.bath_radius_nm, pair_cutoff_nm: model.pair_cutoff_nm, mean_pairs, t2_ms: fit.t2_ms });
    }
    for w in steps.windows(2) {
        if let (Some(a), Some(b)) = (w[0].t2_ms, w[1].t2_ms) {
            if ((a - b) / b).abs() < tolerance {
                let m = PairModel { bath_radius_nm: w[0].bath_radius_nm, pair_cutoff_nm: w[0].pair_cutoff_nm, ..base.clone() };
                return Ok((m, steps));
            }
        }
    }
    Err(Error::Engine(format!("pair model not converged to {tolerance} over {} steps", steps.len())))
}

/// Pair-model Hahn echo of a probe in one bath realization (time domain).
pub fn pair_model_echo(
    electron: ElectronProjection,
    probe: &Vector3<f64>,
    bath: &BathConfiguration,
    model: &PairModel,
    concentration: f64,
    times: &[f64],
) -> Result<CoherenceTrace> {
    model.validate(concentration)?;
    let ms = usize::from(matches!(electron, Some(crate::bath::ElectronState::MsM1)));
    let (radius, cutoff) = model.radii(concentration);
    let pb = PairBath::new(bath, model.field_gauss, cutoff, radius.max(cutoff))?;
    let pairs = pb.pairs_near(probe, radius, model.exclusion_nm);
    let params: Vec<(f64, f64, f64)> =
        pairs.iter().map(|&p| pair_detunings(&pb, probe, crate::constants::GAMMA_C13, ms, p)).collect();
    let values = times
        .iter()
        .map(|&t| params.iter().map(|&(a, b, c)| pair_echo(a, b, c, t)).product())
        .collect();
    Ok(CoherenceTrace::new(times.to_vec(), values)?.with_meta("pairs", pairs.len()))
}

/// Bath of one concentration around the defect, as used by the pair model.
pub fn pair_model_bath(concentration: f64, reach_nm: f64, seed: u64, exclusion_nm: f64) -> Result<BathConfiguration> {
    let extent = Vector3::repeat(2.0 * reach_nm + DIAMOND_LATTICE_NM);
    let sites: Vec<Vector3<f64>> = generate_lattice(extent, DIAMOND_LATTICE_NM)?
        .into_iter()
        .filter(|p| p.norm() <= reach_nm && p.norm() >= exclusion_nm)
        .collect();
    sample_isotopes(&sites, concentration, seed, "13C")
}

/// Probe spin helper for callers that build full systems at a ray point.
pub fn probe_at(theta_deg: f64, phi_deg: f64, distance_nm: f64) -> BathSpin {
    BathSpin::carbon(direction(theta_deg, phi_deg) * distance_nm)
}
