//! Reference results: the closed-form two-spin echo, brute-force evolution
//! of the whole system, and the hybridization-limited T2 model.

use nalgebra::{DMatrix, Vector3};

use crate::bath::{BathConfiguration, BathSpin, BathState, CentralSystem, Electron, ElectronState};
use crate::constants::gamma_field_mhz;
use crate::couplings::InteractionTensor;
use crate::error::{Error, Result};
use crate::hamiltonian::{build_central, build_cluster, CentralEigen, SpinSystem};
use crate::propagation::{central_pulses, qubit_frame, CoherenceTrace, EigenCache, PulseAxis, PulseSequence, PulseTarget};
use crate::scalar::Real;
use crate::spin::{kron, SpinOperatorSet};
use crate::C64;

/// Central spin and one bath spin with a flip-flop coupling; frequencies in
/// kHz (ordinary, not angular).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoSpinModel<T: Real> {
    pub w0_khz: T,
    pub w1_khz: T,
    pub sigma_khz: T,
}

impl<T: Real> TwoSpinModel<T> {
    pub fn new(w0_khz: T, w1_khz: T, sigma_khz: T) -> Self {
        TwoSpinModel { w0_khz, w1_khz, sigma_khz }
    }

    /// `Ω = √((w₁−w₀)² + σ²)`, kHz.
    pub fn omega_khz(&self) -> T {
        let dw = self.w1_khz - self.w0_khz;
        (dw * dw + self.sigma_khz * self.sigma_khz).sqrt()
    }
}

/// Hahn-echo magnetization `(⟨I_x⟩, ⟨I_y⟩)` of the central spin at `t` ms,
/// starting from `|+x⟩` with the π_x pulse at `t/2`.
pub fn two_spin_echo<T: Real>(model: &TwoSpinModel<T>, t_ms: T) -> (T, T) {
    let two_pi = T::two_pi();
    let half = T::lit(0.5);
    let omega = model.omega_khz() * two_pi;
    if omega == T::zero() {
        return (half, T::zero());
    }
    let sigma = model.sigma_khz * two_pi;
    let sum = (model.w0_khz + model.w1_khz) * two_pi;
    let r = sigma * sigma / (omega * omega);
    let c_om = (omega * t_ms * half).cos();
    let c_sum = (sum * t_ms * half).cos();
    let ix = half - r / T::lit(4.0) * (T::one() - c_om - c_sum + c_sum * c_om);
    let s = (omega * t_ms / T::lit(4.0)).sin();
    let iy = r * half * s * s * (sum * t_ms * half).sin();
    (ix, iy)
}

/// `L = 2(⟨I_x⟩ + i⟨I_y⟩)` on a grid.
pub fn two_spin_trace(model: &TwoSpinModel<f64>, times: &[f64]) -> CoherenceTrace {
    let values = times
        .iter()
        .map(|&t| {
            let (x, y) = two_spin_echo(model, t);
            C64::new(2.0 * x, 2.0 * y)
        })
        .collect();
    CoherenceTrace { times: times.to_vec(), values, metadata: Default::default() }
        .with_meta("method", "two-spin closed form")
}

/// The two-spin model as a [`SpinSystem`]: two spin-½ nuclei in a field
/// along z with gyromagnetic ratios chosen to give `w₀`, `w₁`, and a
/// coupling tensor `diag(σ, σ, 0)`, so that `I₀·P·I₁ = σ/2 (I₊I₋ + h.c.)`.
pub fn two_spin_system(model: &TwoSpinModel<f64>) -> Result<SpinSystem> {
    let b = 1000.0;
    // w = −γB/2π in kHz
    let gamma = |w_khz: f64| -2.0 * std::f64::consts::PI * w_khz * 1e-3 * crate::constants::MHZ_MS / b;
    let mut c = BathSpin::carbon(Vector3::zeros());
    c.gamma = gamma(model.w0_khz);
    let mut s = BathSpin::carbon(Vector3::new(0.0, 0.0, 1.0));
    s.gamma = gamma(model.w1_khz);
    let central = CentralSystem::bare(c, b);
    let mut sys = SpinSystem::new(central, BathConfiguration::from_spins(vec![s])?)?;
    let sigma_mhz = model.sigma_khz * 1e-3;
    sys.central_coupling[0] = InteractionTensor::diagonal(sigma_mhz, sigma_mhz, 0.0);
    Ok(sys)
}

/// Bath ensemble for [`exact_l`].
#[derive(Clone, Debug, PartialEq)]
pub enum ExactEnsemble {
    Thermal,
    /// Mean of `L` over these product states.
    Sampled(Vec<BathState>),
}

/// Default capacity of [`exact_l`]: `2¹⁴` states.
pub const EXACT_CAPACITY: usize = 1 << 14;

/// Brute-force `L(t)` of the whole system from the explicit reduced density
/// matrix of the central space.
pub fn exact_l(
    system: &SpinSystem,
    seq: &PulseSequence,
    times: &[f64],
    ensemble: &ExactEnsemble,
    capacity: usize,
) -> Result<CoherenceTrace> {
    let dims = system.central_dims();
    let dc: usize = dims.iter().product();
    let d_bath: usize = system.bath.spins.iter().map(|s| s.spin.dim()).product();
    let dim = dc * d_bath;
    if dim > capacity {
        return Err(Error::Capacity { dimension: dim, capacity });
    }
    let all: Vec<usize> = (0..system.len()).collect();
    let h = build_cluster::<f64>(system, &all, None)?;
    let cache = EigenCache::new(&h.matrix)?;
    let eigen = CentralEigen::<f64>::new(&system.central);
    let frame = qubit_frame(&system.central, &eigen, seq)?;
    let pulses = central_pulses(&system.central, &eigen, PulseAxis::X)?;
    let id = DMatrix::<C64>::identity(d_bath, d_bath);
    let nuc = kron(&pulses.nuclear, &id);
    let el = pulses.electron.as_ref().map(|p| kron(p, &id));

    let columns: Vec<(f64, usize)> = match ensemble {
        ExactEnsemble::Thermal => (0..d_bath).map(|k| (1.0 / d_bath as f64, k)).collect(),
        ExactEnsemble::Sampled(states) => {
            if states.is_empty() {
                return Err(Error::InvalidArgument("empty sample list".into()));
            }
            let w = 1.0 / states.len() as f64;
            states
                .iter()
                .map(|s| {
                    s.validate(&system.bath)?;
                    s.basis_index(&system.bath, &all)
                        .map(|k| (w, k))
                        .ok_or_else(|| Error::InvalidArgument("thermal marker inside a sample list".into()))
                })
                .collect::<Result<_>>()?
        }
    };
    let initial = frame.initial();
    let mut psi0 = DMatrix::<C64>::zeros(dim, columns.len());
    for (j, &(_, k)) in columns.iter().enumerate() {
        for c in 0..dc {
            psi0[(c * d_bath + k, j)] = initial[c];
        }
    }
    // reduced density matrix of the central space
    let reduced = |psi: &DMatrix<C64>| {
        let mut rho = DMatrix::<C64>::zeros(dc, dc);
        for (j, &(w, _)) in columns.iter().enumerate() {
            for r in 0..dc {
                for c in 0..dc {
                    let mut s = C64::new(0.0, 0.0);
                    for k in 0..d_bath {
                        s += psi[(r * d_bath + k, j)] * psi[(c * d_bath + k, j)].conj();
                    }
                    rho[(r, c)] += s * w;
                }
            }
        }
        rho
    };
    let element = |rho: &DMatrix<C64>, bra: &nalgebra::DVector<C64>, ket: &nalgebra::DVector<C64>| {
        (bra.adjoint() * rho * ket)[(0, 0)]
    };
    let norm = element(&reduced(&psi0), &frame.init_b, &frame.init_a);
    let mut values = Vec::with_capacity(times.len());
    for &t in times {
        let mut psi = psi0.clone();
        let mut last = 0.0;
        for e in &seq.events {
            let te = e.fraction * t;
            psi = cache.apply(te - last, &psi);
            last = te;
            psi = match e.target {
                PulseTarget::Central => &nuc * psi,
                PulseTarget::Electron => {
                    el.as_ref().ok_or_else(|| Error::Validation("no electron pulse available".into()))? * psi
                }
            };
        }
        psi = cache.apply(t - last, &psi);
        values.push(element(&reduced(&psi), &frame.read_b, &frame.read_a) / norm);
    }
    Ok(CoherenceTrace::new(times.to_vec(), values)?
        .with_meta("method", "exact")
        .with_meta("sequence", &seq.name))
}

/// One field point of the hybridization model; `None` marks a gap where
/// the levels could not be identified. Times in ms.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridizationPoint {
    pub field_gauss: f64,
    /// Exact eigenvectors.
    pub exact_ms: Option<f64>,
    /// First-order perturbative magnetizations.
    pub perturbative_ms: Option<f64>,
    /// Closed-form approximation exactly as printed in the literature.
    pub closed_form_ms: Option<f64>,
    /// True where any value hit the cap.
    pub capped: bool,
}

/// Output cap for `T2^elim`, ms.
pub const T2_ELIM_CAP_MS: f64 = 1e5;

/// Field-independent shape `(‖P₀‖ + ‖P₁‖)/‖P₀ − P₁‖` of the qubit pair in
/// the `m_s = −1` manifold from exact eigenvectors; `None` if the levels
/// cannot be identified.
pub fn hybridization_shape(system: &CentralSystem) -> Option<f64> {
    let eigen = CentralEigen::<f64>::new(system);
    let (ma, mb) = system.qubit_projections;
    let a = eigen.find(-1.0, ma).ok()?;
    let b = eigen.find(-1.0, mb).ok()?;
    let e = system.electron.as_ref()?;
    let ops = SpinOperatorSet::<f64>::new(e.spin);
    let dn = system.central.spin.dim();
    let id = DMatrix::<C64>::identity(dn, dn);
    let mag = |k: usize| {
        let v = eigen.vectors.column(k);
        let comps: Vec<f64> = ops
            .cartesian()
            .iter()
            .map(|s| (v.adjoint() * kron(s, &id) * v)[(0, 0)].re)
            .collect();
        Vector3::new(comps[0], comps[1], comps[2])
    };
    let (p0, p1) = (mag(b), mag(a));
    let diff = (p0 - p1).norm();
    Some((p0.norm() + p1.norm()) / diff)
}

/// First-order shape: `‖P₀‖ + ‖P₁‖ ≈ 2` and the transverse electron
/// magnetization difference `A_xz(A_xx + A_zz + γₙB)/(ΔE·N)` with
/// `ΔE = D − |γₑ|B` and `N = √(A_xz² + (A_zz + γₙB)²)` (MHz).
pub fn perturbative_shape(system: &CentralSystem) -> Option<f64> {
    let e = system.electron.as_ref()?;
    let a = &e.hyperfine_to_central;
    let bz = system.field_gauss.z;
    let gn = -gamma_field_mhz(system.central.gamma, bz);
    let ge = gamma_field_mhz(e.gamma, bz);
    let de = e.zfs_mhz + ge;
    let (axx, azz, axz) = (a.get(0, 0), a.get(2, 2), a.get(0, 2));
    let n = (axz * axz + (azz - gn).powi(2)).sqrt();
    let dp = (axz * (axx + azz - gn) / (de * n)).abs();
    if dp == 0.0 {
        return None;
    }
    Some(2.0 / dp)
}

/// `4(D + γₑB)(A_zz + γₙB) / (A_xz(A_xx + 2A_zz + 2γₙB))` with signed γ in
/// MHz/G, as printed; multiply by 𝒞.
pub fn closed_form_shape(system: &CentralSystem) -> Option<f64> {
    let e = system.electron.as_ref()?;
    let a = &e.hyperfine_to_central;
    let bz = system.field_gauss.z;
    let ge_b = gamma_field_mhz(e.gamma, bz);
    let gn_b = gamma_field_mhz(system.central.gamma, bz);
    let den = a.get(0, 2) * (a.get(0, 0) + 2.0 * a.get(2, 2) + 2.0 * gn_b);
    if den == 0.0 {
        return None;
    }
    Some((4.0 * (e.zfs_mhz + ge_b) * (a.get(2, 2) + gn_b) / den).abs())
}

/// `T2^elim(B)` over a field sweep (fields in G along z) with constant
/// `c_ms`.
pub fn hybridization_t2(system: &CentralSystem, fields_gauss: &[f64], c_ms: f64) -> Result<Vec<HybridizationPoint>> {
    if system.electron.is_none() {
        return Err(Error::Validation("hybridization model needs an electron".into()));
    }
    Ok(fields_gauss
        .iter()
        .map(|&b| {
            let mut s = system.clone();
            s.field_gauss = Vector3::new(0.0, 0.0, b);
            s.electron_state = ElectronState::MsM1;
            let mut capped = false;
            let mut cap = |x: Option<f64>| {
                x.map(|v| {
                    let t = c_ms * v;
                    if !t.is_finite() || t > T2_ELIM_CAP_MS {
                        capped = true;
                        T2_ELIM_CAP_MS
                    } else {
                        t
                    }
                })
            };
            let exact_ms = cap(hybridization_shape(&s));
            let perturbative_ms = cap(perturbative_shape(&s));
            let closed_form_ms = cap(closed_form_shape(&s));
            HybridizationPoint { field_gauss: b, exact_ms, perturbative_ms, closed_form_ms, capped }
        })
        .collect())
}

/// Least-squares 𝒞 in log space: `ln 𝒞 = mean(ln T2 − ln shape)`.
pub fn fit_hybridization_constant(shape: &[f64], t2_ms: &[f64]) -> Result<f64> {
    let pairs: Vec<(f64, f64)> = shape
        .iter()
        .zip(t2_ms)
        .filter(|(s, t)| **s > 0.0 && **t > 0.0 && s.is_finite() && t.is_finite())
        .map(|(s, t)| (*s, *t))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Validation("no usable points to fit the hybridization constant".into()));
    }
    let m = pairs.iter().map(|(s, t)| t.ln() - s.ln()).sum::<f64>() / pairs.len() as f64;
    Ok(m.exp())
}

/// Central ¹³C of the Hahn-echo two-spin check with the electron absent.
pub fn bare_carbon(field_gauss: f64) -> CentralSystem {
    CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), field_gauss)
}

/// First-shell ¹³C hyperfine tensor of the NV centre in the [111] frame, MHz.
pub fn first_shell_hyperfine() -> InteractionTensor<f64> {
    InteractionTensor::new_unchecked(nalgebra::Matrix3::new(99.8, 0.0, 25.5, 0.0, 176.8, 0.0, 25.5, 0.0, 108.0))
}

/// First-shell ¹³C next to an NV centre in `m_s = −1`, field along z.
pub fn first_shell_system(field_gauss: f64) -> CentralSystem {
    let mut c = CentralSystem::bare(BathSpin::carbon(Vector3::new(0.0, 0.0, 0.154)), field_gauss);
    c.electron = Some(Electron::nv(first_shell_hyperfine()));
    c.electron_state = ElectronState::MsM1;
    c
}

/// Eigenvalues of `H_en` (MHz, ascending) at each field.
pub fn level_diagram(system: &CentralSystem, fields_gauss: &[f64]) -> Vec<Vec<f64>> {
    fields_gauss
        .iter()
        .map(|&b| {
            let mut s = system.clone();
            s.field_gauss = Vector3::new(0.0, 0.0, b);
            let h = build_central::<f64>(&s);
            crate::hamiltonian::eigh(&h.matrix).0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::time_grid;

    #[test]
    fn no_coupling_gives_constant_magnetization() {
        let m = TwoSpinModel::new(535.0, 535.0, 0.0);
        for t in [0.0, 0.3, 7.0] {
            assert_eq!(two_spin_echo(&m, t), (0.5, 0.0));
        }
    }

    #[test]
    fn time_zero() {
        let m = TwoSpinModel::new(535.0, 520.0, 0.151);
        let (x, y): (f64, f64) = two_spin_echo(&m, 0.0);
        assert!((x - 0.5).abs() < 1e-15 && y.abs() < 1e-15);
    }

    #[test]
    fn equal_larmor_reduces() {
        let sigma = 0.151;
        let m = TwoSpinModel::new(0.3, 0.3, sigma);
        assert_eq!(m.omega_khz(), sigma);
        let w = 2.0 * std::f64::consts::PI * 0.3;
        let s = 2.0 * std::f64::consts::PI * sigma;
        for t in [0.1, 1.0, 13.0] {
            let (_, y) = two_spin_echo(&m, t);
            let expected = 0.5 * (s * t / 4.0).sin().powi(2) * (w * t).sin();
            assert!((y - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn generic_in_f32() {
        let m = TwoSpinModel::<f32>::new(10.0, 12.0, 1.0);
        let (x, y) = two_spin_echo(&m, 0.7f32);
        let (x64, y64) = two_spin_echo(&TwoSpinModel::new(10.0, 12.0, 1.0), 0.7);
        assert!((x as f64 - x64).abs() < 1e-5 && (y as f64 - y64).abs() < 1e-5);
    }

    #[test]
    fn exact_matches_closed_form() {
        for (w0, w1, s) in [(535.0, 535.0, 0.151), (3.0, 2.0, 1.5), (0.4, -0.2, 0.3)] {
            let model = TwoSpinModel::new(w0, w1, s);
            let sys = two_spin_system(&model).unwrap();
            let times = time_grid(10.0, 41);
            let exact = exact_l(&sys, &PulseSequence::hahn(), &times, &ExactEnsemble::Thermal, EXACT_CAPACITY).unwrap();
            let closed = two_spin_trace(&model, &times);
            let diff = exact.max_abs_diff(&closed).unwrap();
            assert!(diff < 1e-10, "{w0} {w1} {s}: {diff}");
        }
    }

    #[test]
    fn exact_without_bath_is_unit_modulus() {
        let sys = SpinSystem::new(bare_carbon(500.0), BathConfiguration::empty()).unwrap();
        let tr = exact_l(&sys, &PulseSequence::ramsey(), &time_grid(1.0, 11), &ExactEnsemble::Thermal, EXACT_CAPACITY).unwrap();
        assert!(tr.abs().iter().all(|a| (a - 1.0).abs() < 1e-12));
    }

    #[test]
    fn capacity_error() {
        let spins: Vec<BathSpin> = (0..5).map(|i| BathSpin::carbon(Vector3::new(0.3 * (i + 1) as f64, 0.0, 0.0))).collect();
        let sys = SpinSystem::new(bare_carbon(500.0), BathConfiguration::from_spins(spins).unwrap()).unwrap();
        let err = exact_l(&sys, &PulseSequence::hahn(), &[0.0], &ExactEnsemble::Thermal, 32).unwrap_err();
        assert!(matches!(err, Error::Capacity { dimension: 64, capacity: 32 }));
    }

    fn first_shell(b: f64) -> CentralSystem {
        first_shell_system(b)
    }

    #[test]
    fn hybridization_vanishes_at_high_field() {
        // grows roughly linearly in B once D − |γₑ|B dominates
        let pts = hybridization_t2(&first_shell(0.0), &[5000.0, 100_000.0, 1_000_000.0, 1e8], 0.31).unwrap();
        assert!(pts[0].exact_ms.unwrap() < pts[1].exact_ms.unwrap());
        assert!(pts[1].exact_ms.unwrap() < pts[2].exact_ms.unwrap());
        assert!(!pts[2].capped);
        assert!(pts[3].capped);
        assert_eq!(pts[3].exact_ms, Some(T2_ELIM_CAP_MS));
    }

    #[test]
    fn perturbative_agrees_with_exact_to_first_order() {
        for b in [3000.0, 10_000.0, 30_000.0] {
            let s = first_shell(b);
            let ex = hybridization_shape(&s).unwrap();
            let pt = perturbative_shape(&s).unwrap();
            assert!((ex / pt - 1.0).abs() < 0.05, "{b}: {ex} {pt}");
        }
    }

    #[test]
    fn larger_transverse_coupling_shortens_t2() {
        let mut prev = f64::INFINITY;
        for axz in [5.0, 15.0, 25.5, 40.0] {
            let a = InteractionTensor::new(nalgebra::Matrix3::new(99.8, 0.0, axz, 0.0, 176.8, 0.0, axz, 0.0, 108.0)).unwrap();
            let mut s = first_shell(10_000.0);
            s.electron.as_mut().unwrap().hyperfine_to_central = a;
            let t = closed_form_shape(&s).unwrap();
            assert!(t < prev);
            prev = t;
        }
    }

    #[test]
    fn constant_fit_recovers_scale() {
        let shape = [10.0, 20.0, 40.0];
        let t2: Vec<f64> = shape.iter().map(|s| 0.31 * s).collect();
        assert!((fit_hybridization_constant(&shape, &t2).unwrap() - 0.31).abs() < 1e-12);
    }
}
