//! Unitary evolution `U = exp(−2πi·H·t)` (H in MHz, t in ms) and ideal
//! instantaneous π-pulse sequences.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bath::{CentralSystem, ElectronState};
use crate::constants::MHZ_MS;
use crate::error::{Error, Result};
use crate::hamiltonian::{eigh, is_hermitian, CentralEigen};
use crate::scalar::{cplx, creal, Cplx, Real};
use crate::spin::kron;
use crate::C64;

/// Relative Hermiticity tolerance accepted by [`EigenCache::new`].
pub const HERMITIAN_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct Propagator<T: Real> {
    pub matrix: DMatrix<Cplx<T>>,
    pub interval: (f64, f64),
}

impl<T: Real> Propagator<T> {
    pub fn unitarity_error(&self) -> T {
        let n = self.matrix.nrows();
        (self.matrix.adjoint() * &self.matrix - DMatrix::identity(n, n)).norm()
    }
}

/// Eigen-decomposition of a Hamiltonian, reused across a time grid.
#[derive(Clone, Debug)]
pub struct EigenCache<T: Real> {
    pub values: Vec<T>,
    pub vectors: DMatrix<Cplx<T>>,
}

impl<T: Real> EigenCache<T> {
    pub fn new(h: &DMatrix<Cplx<T>>) -> Result<Self> {
        if !is_hermitian(h, T::lit(HERMITIAN_TOL)) {
            return Err(Error::Validation("Hamiltonian is not Hermitian".into()));
        }
        let (values, vectors) = eigh(h);
        Ok(EigenCache { values, vectors })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `e^{−2πiλt}` for every eigenvalue.
    pub fn phases(&self, t_ms: f64) -> Vec<Cplx<T>> {
        let k = T::lit(-2.0 * std::f64::consts::PI * MHZ_MS * t_ms);
        self.values
            .iter()
            .map(|&l| {
                let a = k * l;
                cplx(a.cos(), a.sin())
            })
            .collect()
    }

    pub fn propagator(&self, t_ms: f64) -> Propagator<T> {
        let ph = self.phases(t_ms);
        let mut scaled = self.vectors.clone();
        for (c, p) in ph.iter().enumerate() {
            scaled.column_mut(c).scale_mut_complex(*p);
        }
        Propagator { matrix: scaled * self.vectors.adjoint(), interval: (0.0, t_ms) }
    }

    /// `U(t)·ψ` for the columns of `psi`.
    pub fn apply(&self, t_ms: f64, psi: &DMatrix<Cplx<T>>) -> DMatrix<Cplx<T>> {
        let mut w = self.vectors.adjoint() * psi;
        scale_rows(&mut w, &self.phases(t_ms));
        &self.vectors * w
    }
}

trait ScaleComplex<T: Real> {
    fn scale_mut_complex(&mut self, s: Cplx<T>);
}

impl<T: Real, S> ScaleComplex<T> for nalgebra::Matrix<Cplx<T>, nalgebra::Dyn, nalgebra::U1, S>
where
    S: nalgebra::StorageMut<Cplx<T>, nalgebra::Dyn, nalgebra::U1>,
{
    fn scale_mut_complex(&mut self, s: Cplx<T>) {
        for v in self.iter_mut() {
            *v *= s;
        }
    }
}

pub(crate) fn scale_rows<T: Real>(w: &mut DMatrix<Cplx<T>>, f: &[Cplx<T>]) {
    for c in 0..w.ncols() {
        for (r, p) in f.iter().enumerate() {
            w[(r, c)] *= *p;
        }
    }
}

/// Propagator of a Hermitian Hamiltonian over `t` ms.
pub fn evolve<T: Real>(h: &DMatrix<Cplx<T>>, t_ms: f64) -> Result<Propagator<T>> {
    Ok(EigenCache::new(h)?.propagator(t_ms))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PulseTarget {
    Central,
    Electron,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub enum PulseAxis {
    #[default]
    X,
    Y,
}

/// π rotation at `fraction · total_time`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PulseEvent {
    pub fraction: f64,
    pub target: PulseTarget,
    pub axis: PulseAxis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    Constant,
    Random,
}

/// Pulse timings as fractions of the total evolution time, so one sequence
/// serves a whole time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PulseSequence {
    pub name: String,
    pub events: Vec<PulseEvent>,
}

impl PulseSequence {
    /// Sorts events and checks them. Simultaneous events must target
    /// different spins; the central pulse goes first.
    pub fn new(name: &str, mut events: Vec<PulseEvent>) -> Result<Self> {
        for e in &events {
            if !(0.0..=1.0).contains(&e.fraction) {
                return Err(Error::Validation(format!("pulse at fraction {} outside [0, 1]", e.fraction)));
            }
        }
        events.sort_by(|a, b| {
            a.fraction
                .partial_cmp(&b.fraction)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then((a.target == PulseTarget::Electron).cmp(&(b.target == PulseTarget::Electron)))
        });
        for w in events.windows(2) {
            if w[0].fraction == w[1].fraction && w[0].target == w[1].target {
                return Err(Error::Validation(format!("two pulses on the same spin at fraction {}", w[0].fraction)));
            }
        }
        Ok(PulseSequence { name: name.to_string(), events })
    }

    pub fn ramsey() -> Self {
        PulseSequence { name: "ramsey".into(), events: Vec::new() }
    }

    pub fn hahn() -> Self {
        PulseSequence {
            name: "hahn".into(),
            events: vec![PulseEvent { fraction: 0.5, target: PulseTarget::Central, axis: PulseAxis::X }],
        }
    }

    /// Hahn echo with one electron π pulse at fraction `delta`.
    pub fn hahn_with_electron(delta: f64) -> Result<Self> {
        let mut ev = Self::hahn().events;
        ev.push(PulseEvent { fraction: delta, target: PulseTarget::Electron, axis: PulseAxis::X });
        Self::new(&format!("hahn+pi_e@{delta}"), ev)
    }

    /// Adds the central Hahn π pulse.
    pub fn with_central_echo(&self) -> Result<Self> {
        let mut ev = self.events.clone();
        ev.push(PulseEvent { fraction: 0.5, target: PulseTarget::Central, axis: PulseAxis::X });
        Self::new(&format!("hahn+{}", self.name), ev)
    }

    pub fn electron_pulses(&self) -> usize {
        self.events.iter().filter(|e| e.target == PulseTarget::Electron).count()
    }

    pub fn central_pulses(&self) -> usize {
        self.events.iter().filter(|e| e.target == PulseTarget::Central).count()
    }
}

/// `n` electron π pulses: evenly spaced at `k/(n+1)`, or with uniform
/// random gaps normalised to the total time.
pub fn electron_pulse_train(n: usize, spacing: Spacing, seed: u64) -> Result<PulseSequence> {
    if n == 0 {
        return Err(Error::InvalidArgument("pulse train needs at least one pulse".into()));
    }
    let fractions: Vec<f64> = match spacing {
        Spacing::Constant => (1..=n).map(|k| k as f64 / (n + 1) as f64).collect(),
        Spacing::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gaps: Vec<f64> = (0..=n).map(|_| rng.random::<f64>() + f64::MIN_POSITIVE).collect();
            let sum: f64 = gaps.iter().sum();
            gaps.iter()
                .take(n)
                .scan(0.0, |acc, g| {
                    *acc += g / sum;
                    Some(*acc)
                })
                .collect()
        }
    };
    let events = fractions
        .into_iter()
        .map(|fraction| PulseEvent { fraction, target: PulseTarget::Electron, axis: PulseAxis::X })
        .collect();
    let name = match spacing {
        Spacing::Constant => format!("pi_e x{n} constant"),
        Spacing::Random => format!("pi_e x{n} random seed {seed}"),
    };
    PulseSequence::new(&name, events)
}

/// Uniform grid of `points` times on `[0, t_max]`.
pub fn time_grid(t_max_ms: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points).map(|i| t_max_ms * i as f64 / (points - 1) as f64).collect(),
    }
}

/// Complex coherence `L(t)` on a time grid, with provenance metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceTrace {
    pub times: Vec<f64>,
    pub values: Vec<C64>,
    pub metadata: BTreeMap<String, String>,
}

impl CoherenceTrace {
    pub fn new(times: Vec<f64>, values: Vec<C64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Validation(format!("{} times but {} values", times.len(), values.len())));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Validation("trace times must increase strictly".into()));
        }
        Ok(CoherenceTrace { times, values, metadata: BTreeMap::new() })
    }

    pub fn constant(times: &[f64], value: C64) -> Self {
        CoherenceTrace { times: times.to_vec(), values: vec![value; times.len()], metadata: BTreeMap::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn with_metadata_map(mut self, map: BTreeMap<String, String>) -> Self {
        self.metadata.extend(map);
        self
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn abs(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    /// `max_t |L₁(t) − L₂(t)|`; grids must match.
    pub fn max_abs_diff(&self, other: &CoherenceTrace) -> Result<f64> {
        if self.times != other.times {
            return Err(Error::Validation("traces on different time grids".into()));
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
    }

    /// First `n` points.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        CoherenceTrace { times: self.times[..n].to_vec(), values: self.values[..n].to_vec(), metadata: self.metadata.clone() }
    }
}

/// Ideal pulse operators on the central space (product basis).
#[derive(Clone, Debug)]
pub struct CentralPulses<T: Real> {
    pub nuclear: DMatrix<Cplx<T>>,
    pub electron: Option<DMatrix<Cplx<T>>>,
    /// The same operators in the eigenbasis of `H_en`, where they are
    /// permutations with phases.
    pub nuclear_eig: DMatrix<Cplx<T>>,
    pub electron_eig: Option<DMatrix<Cplx<T>>>,
}

/// Qubit pair `(a, b)` in the manifold of electron state `ms`.
fn qubit_pair<T: Real>(eigen: &CentralEigen<T>, ms: f64, proj: (f64, f64)) -> Result<(usize, usize)> {
    let a = eigen.find(ms, proj.0)?;
    let b = eigen.find(ms, proj.1)?;
    Ok((a, b))
}

/// π about `axis` on the qubit pair of every electron manifold where it can
/// be identified, identity elsewhere; electron π exchanges `m_s = 0` and
/// `m_s = −1` eigenstates with equal nuclear label, identity on `+1`.
pub fn central_pulses<T: Real>(system: &CentralSystem, eigen: &CentralEigen<T>, axis: PulseAxis) -> Result<CentralPulses<T>> {
    let n = eigen.dim();
    let proj = system.qubit_projections;
    let manifolds: Vec<f64> = match &system.electron {
        Some(e) => (0..e.spin.dim()).map(|i| e.spin.projection(i)).collect(),
        None => vec![0.0],
    };
    let mut p = DMatrix::<Cplx<T>>::identity(n, n);
    let mut done = 0;
    for &ms in &manifolds {
        let Ok((a, b)) = qubit_pair(eigen, ms, proj) else { continue };
        let (ab, ba) = match axis {
            PulseAxis::X => (creal(T::one()), creal(T::one())),
            PulseAxis::Y => (creal(-T::one()), creal(T::one())),
        };
        p[(a, a)] = creal(T::zero());
        p[(b, b)] = creal(T::zero());
        p[(a, b)] = ab;
        p[(b, a)] = ba;
        done += 1;
    }
    if done == 0 {
        return Err(Error::Engine("qubit levels not identifiable in any electron manifold".into()));
    }
    let nuclear = &eigen.vectors * &p * eigen.vectors.adjoint();
    let electron_eig = match &system.electron {
        None => None,
        Some(_) => match electron_permutation(system, eigen) {
            Ok(perm) => Some(perm),
            Err(e) => {
                log::debug!("electron pulse unavailable: {e}");
                None
            }
        },
    };
    let electron = electron_eig.as_ref().map(|perm| &eigen.vectors * perm * eigen.vectors.adjoint());
    Ok(CentralPulses { nuclear, electron, nuclear_eig: p, electron_eig })
}

/// Eigenbasis permutation of the electron π pulse.
pub fn electron_permutation<T: Real>(system: &CentralSystem, eigen: &CentralEigen<T>) -> Result<DMatrix<Cplx<T>>> {
    let n = eigen.dim();
    let nuc = system.central.spin;
    let mut p = DMatrix::<Cplx<T>>::identity(n, n);
    for k in 0..nuc.dim() {
        let m = nuc.projection(k);
        let i0 = eigen.find(0.0, m)?;
        let i1 = eigen.find(-1.0, m)?;
        p[(i0, i0)] = creal(T::zero());
        p[(i1, i1)] = creal(T::zero());
        p[(i0, i1)] = creal(T::one());
        p[(i1, i0)] = creal(T::one());
    }
    Ok(p)
}

/// Electron state after all electron pulses of `seq`.
pub fn final_electron_state(initial: ElectronState, seq: &PulseSequence) -> ElectronState {
    (0..seq.electron_pulses()).fold(initial, |s, _| s.flipped())
}

/// Initial and read-out qubit vectors of a sequence.
#[derive(Clone, Debug)]
pub struct QubitFrame<T: Real> {
    /// Qubit pair of the initial manifold; the state starts in `(|a⟩ + |b⟩)/√2`.
    pub init_a: DVector<Cplx<T>>,
    pub init_b: DVector<Cplx<T>>,
    /// Qubit pair of the final manifold.
    pub read_a: DVector<Cplx<T>>,
    pub read_b: DVector<Cplx<T>>,
}

impl<T: Real> QubitFrame<T> {
    pub fn initial(&self) -> DVector<Cplx<T>> {
        (&self.init_a + &self.init_b) * creal(T::lit(std::f64::consts::FRAC_1_SQRT_2))
    }
}

pub fn qubit_frame<T: Real>(system: &CentralSystem, eigen: &CentralEigen<T>, seq: &PulseSequence) -> Result<QubitFrame<T>> {
    let proj = system.qubit_projections;
    let (a, b) = qubit_pair(eigen, system.electron_state.projection(), proj)?;
    let fin = final_electron_state(system.electron_state, seq);
    let (fa, fb) = qubit_pair(eigen, fin.projection(), proj)?;
    Ok(QubitFrame {
        init_a: eigen.vectors.column(a).into_owned(),
        init_b: eigen.vectors.column(b).into_owned(),
        read_a: eigen.vectors.column(fa).into_owned(),
        read_b: eigen.vectors.column(fb).into_owned(),
    })
}

/// Initial state of the spins that evolve with the central system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BathInit {
    /// Maximally mixed.
    Thermal,
    /// One product-basis state.
    Basis(usize),
}

/// Exact evolution of central ⊗ bath under `h` with the pulses of `seq`.
///
/// Returns `L(t) = ⟨b|Tr_B ρ(t)|a⟩ / ⟨b|ρ(0)|a⟩`.
pub fn run_sequence<T: Real>(
    h: &DMatrix<Cplx<T>>,
    pulses: &CentralPulses<T>,
    frame: &QubitFrame<T>,
    seq: &PulseSequence,
    bath: BathInit,
    times: &[f64],
) -> Result<CoherenceTrace> {
    SequenceRunner::new(h, pulses, frame, seq)?.run(bath, times)
}

/// [`run_sequence`] split so one diagonalization serves several initial
/// bath states.
#[derive(Clone, Debug)]
pub struct SequenceRunner<T: Real> {
    cache: EigenCache<T>,
    seq: PulseSequence,
    initial: DVector<Cplx<T>>,
    nuc_eig: DMatrix<Cplx<T>>,
    el_eig: Option<DMatrix<Cplx<T>>>,
    // ⟨x,k| in the eigenbasis for the read-out and initial qubit levels
    ra: DMatrix<Cplx<T>>,
    rb: DMatrix<Cplx<T>>,
    ia: DMatrix<Cplx<T>>,
    ib: DMatrix<Cplx<T>>,
}

impl<T: Real> SequenceRunner<T> {
    pub fn new(h: &DMatrix<Cplx<T>>, pulses: &CentralPulses<T>, frame: &QubitFrame<T>, seq: &PulseSequence) -> Result<Self> {
        let initial = frame.initial();
        let dc = initial.len();
        let dim = h.nrows();
        if !dim.is_multiple_of(dc) {
            return Err(Error::InvalidArgument(format!("dimension {dim} is not a multiple of central dimension {dc}")));
        }
        let d = dim / dc;
        if seq.electron_pulses() > 0 && pulses.electron.is_none() {
            return Err(Error::Validation("sequence has electron pulses but no electron pulse operator is available".into()));
        }
        let cache = EigenCache::new(h)?;
        let v = &cache.vectors;
        let id = DMatrix::<Cplx<T>>::identity(d, d);
        let to_eig = |p: &DMatrix<Cplx<T>>| v.adjoint() * kron(p, &id) * v;
        let nuc_eig = to_eig(&pulses.nuclear);
        let el_eig = pulses.electron.as_ref().map(to_eig);
        // rows (⟨x|⊗⟨k|)·V
        let read = |x: &DVector<Cplx<T>>| {
            let mut m = DMatrix::<Cplx<T>>::zeros(d, dim);
            for k in 0..d {
                for c in 0..dc {
                    let coef = x[c].conj();
                    if coef != creal(T::zero()) {
                        for col in 0..dim {
                            m[(k, col)] += coef * v[(c * d + k, col)];
                        }
                    }
                }
            }
            m
        };
        let (ra, rb) = (read(&frame.read_a), read(&frame.read_b));
        let (ia, ib) = (read(&frame.init_a), read(&frame.init_b));
        Ok(SequenceRunner { seq: seq.clone(), initial, nuc_eig, el_eig, ra, rb, ia, ib, cache })
    }

    pub fn run(&self, bath: BathInit, times: &[f64]) -> Result<CoherenceTrace> {
        let dc = self.initial.len();
        let dim = self.cache.dim();
        let d = dim / dc;
        let cols: Vec<usize> = match bath {
            BathInit::Thermal => (0..d).collect(),
            BathInit::Basis(k) => {
                if k >= d {
                    return Err(Error::InvalidArgument(format!("bath basis state {k} out of range {d}")));
                }
                vec![k]
            }
        };
        let weight = T::one() / T::lit(cols.len() as f64);
        let mut psi0 = DMatrix::<Cplx<T>>::zeros(dim, cols.len());
        for (j, &k) in cols.iter().enumerate() {
            for c in 0..dc {
                psi0[(c * d + k, j)] = self.initial[c];
            }
        }
        let w0 = self.cache.vectors.adjoint() * &psi0;
        let coherence = |ra: &DMatrix<Cplx<T>>, rb: &DMatrix<Cplx<T>>, w: &DMatrix<Cplx<T>>| {
            let pa = ra * w;
            let pb = rb * w;
            let mut s = creal(T::zero());
            for (x, y) in pb.iter().zip(pa.iter()) {
                s += *x * y.conj();
            }
            s * creal(weight)
        };
        let norm = coherence(&self.ia, &self.ib, &w0);
        if norm.norm_sqr() < T::lit(1e-24) {
            return Err(Error::Engine("initial qubit coherence vanishes".into()));
        }
        let mut values = Vec::with_capacity(times.len());
        for &t in times {
            let mut w = w0.clone();
            let mut last = 0.0;
            for e in &self.seq.events {
                let te = e.fraction * t;
                scale_rows(&mut w, &self.cache.phases(te - last));
                last = te;
                w = match e.target {
                    PulseTarget::Central => &self.nuc_eig * &w,
                    PulseTarget::Electron => self.el_eig.as_ref().expect("checked in new") * &w,
                };
            }
            scale_rows(&mut w, &self.cache.phases(t - last));
            let l = coherence(&self.ra, &self.rb, &w) / norm;
            values.push(C64::new(l.re.to_f64_lossy(), l.im.to_f64_lossy()));
        }
        let mut trace = CoherenceTrace::new(times.to_vec(), values)?;
        trace.metadata.insert("sequence".into(), self.seq.name.clone());
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_hermitian(n: usize, seed: u64) -> DMatrix<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::<C64>::from_fn(n, n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        (&a + a.adjoint()) * C64::new(0.5, 0.0)
    }

    #[test]
    fn zero_time_is_identity() {
        let h = random_hermitian(6, 1);
        let u = evolve(&h, 0.0).unwrap();
        assert!((u.matrix - DMatrix::identity(6, 6)).norm() < 1e-12);
    }

    #[test]
    fn larmor_half_period() {
        let f = 0.25;
        let h = DMatrix::<C64>::from_diagonal(&nalgebra::DVector::from_vec(vec![C64::new(f / 2.0, 0.0), C64::new(-f / 2.0, 0.0)]));
        let t = 1.0 / (2.0 * f) / MHZ_MS;
        let u = evolve(&h, t).unwrap();
        assert!((u.matrix[(0, 0)] - C64::new(0.0, -1.0)).norm() < 1e-12);
        assert!((u.matrix[(1, 1)] - C64::new(0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn composition_and_unitarity() {
        for seed in 0..10 {
            let h = random_hermitian(8, seed);
            let c = EigenCache::new(&h).unwrap();
            let (u1, u2, u12) = (c.propagator(0.3e-3), c.propagator(0.45e-3), c.propagator(0.75e-3));
            assert!((&u1.matrix * &u2.matrix - &u12.matrix).norm() < 1e-10);
            assert!(u12.unitarity_error() < 1e-10);
        }
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut h = random_hermitian(3, 2);
        h[(0, 1)] += C64::new(1.0, 0.0);
        assert!(matches!(evolve(&h, 1.0), Err(Error::Validation(_))));
    }

    #[test]
    fn pulse_train_layouts() {
        let one = electron_pulse_train(1, Spacing::Constant, 0).unwrap();
        assert_eq!(one.events.len(), 1);
        assert_eq!(one.events[0].fraction, 0.5);
        let two = electron_pulse_train(2, Spacing::Constant, 0).unwrap();
        assert!((two.events[0].fraction - 1.0 / 3.0).abs() < 1e-15);
        assert!((two.events[1].fraction - 2.0 / 3.0).abs() < 1e-15);
        let r1 = electron_pulse_train(64, Spacing::Random, 9).unwrap();
        let r2 = electron_pulse_train(64, Spacing::Random, 9).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.events.windows(2).all(|w| w[1].fraction > w[0].fraction));
        assert!(r1.events.last().unwrap().fraction < 1.0);
        assert!(electron_pulse_train(0, Spacing::Constant, 0).is_err());
    }

    #[test]
    fn simultaneous_pulses_nucleus_first() {
        let s = PulseSequence::hahn_with_electron(0.5).unwrap();
        assert_eq!(s.events[0].target, PulseTarget::Central);
        assert_eq!(s.events[1].target, PulseTarget::Electron);
        assert!(PulseSequence::new("bad", vec![PulseEvent { fraction: 1.5, target: PulseTarget::Central, axis: PulseAxis::X }]).is_err());
    }

    #[test]
    fn time_grid_endpoints() {
        let g = time_grid(2.0, 5);
        assert_eq!(g, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    }
}
