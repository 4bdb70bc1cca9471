//! Dense Hamiltonians in explicit product bases, MHz.
//!
//! Conventions: every spin carries the Zeeman term `−γB·I` (including the
//! electron, whose negative γ then gives `+|γₑ|B·S_z`), the zero-field
//! splitting enters as `D·S_z²`, and couplings are `S·A·I` and `I·P·J`.
//! Basis order is electron (if any), central nucleus, then cluster spins in
//! the order given.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, Vector3};

use crate::bath::{BathConfiguration, CentralSystem};
use crate::constants::gamma_field_mhz;
use crate::couplings::{dipolar_tensor, InteractionTensor};
use crate::error::{Error, Result};
use crate::scalar::{creal, Cplx, Real};
use crate::spin::{ProductSpace, SpinOperatorSet, SpinQuantum};

#[derive(Clone, Debug)]
pub struct HamiltonianMatrix<T: Real> {
    pub labels: Vec<String>,
    pub dims: Vec<usize>,
    pub matrix: DMatrix<Cplx<T>>,
}

impl<T: Real> HamiltonianMatrix<T> {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn space(&self) -> ProductSpace {
        ProductSpace::new(self.dims.clone())
    }

    /// `‖H − H†‖ ≤ tol·max(‖H‖, 1)`.
    pub fn is_hermitian(&self, tol: T) -> bool {
        is_hermitian(&self.matrix, tol)
    }

    /// Text dump: a `# labels`/`# dims` header, then `row col re im` for
    /// every nonzero element.
    pub fn dump<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "# labels {}", self.labels.join(" "))?;
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        writeln!(w, "# dims {}", dims.join(" "))?;
        for c in 0..self.dim() {
            for r in 0..self.dim() {
                let v = self.matrix[(r, c)];
                if v.re != T::zero() || v.im != T::zero() {
                    writeln!(w, "{r} {c} {:?} {:?}", v.re.to_f64_lossy(), v.im.to_f64_lossy())?;
                }
            }
        }
        Ok(())
    }
}

pub fn is_hermitian<T: Real>(m: &DMatrix<Cplx<T>>, tol: T) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.norm().max(T::one());
    (m - m.adjoint()).norm() <= tol * scale
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub fn eigh<T: Real>(m: &DMatrix<Cplx<T>>) -> (Vec<T>, DMatrix<Cplx<T>>) {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Makes the largest-magnitude component of every column real and positive,
/// so eigenvectors close to product states carry the product-state phase.
pub fn fix_gauge<T: Real>(vectors: &mut DMatrix<Cplx<T>>) {
    for c in 0..vectors.ncols() {
        let mut best = 0;
        for r in 0..vectors.nrows() {
            if vectors[(r, c)].norm_sqr() > vectors[(best, c)].norm_sqr() {
                best = r;
            }
        }
        let v = vectors[(best, c)];
        let m = v.norm_sqr().sqrt();
        if m > T::zero() {
            let phase = v.conj() * creal(T::one() / m);
            for r in 0..vectors.nrows() {
                vectors[(r, c)] *= phase;
            }
        }
    }
}

/// Spin operators keyed by spin quantum number.
#[derive(Default)]
pub struct OperatorCache<T: Real> {
    sets: HashMap<SpinQuantum, SpinOperatorSet<T>>,
}

impl<T: Real> OperatorCache<T> {
    pub fn new() -> Self {
        OperatorCache { sets: HashMap::new() }
    }

    pub fn get(&mut self, s: SpinQuantum) -> &SpinOperatorSet<T> {
        self.sets.entry(s).or_insert_with(|| SpinOperatorSet::new(s))
    }
}

fn add_field<T: Real>(space: &ProductSpace, h: &mut DMatrix<Cplx<T>>, site: usize, ops: &SpinOperatorSet<T>, v: [f64; 3]) {
    for (a, op) in ops.cartesian().into_iter().enumerate() {
        if v[a] != 0.0 {
            space.add_site_op(h, site, op, creal(T::lit(v[a])));
        }
    }
}

fn add_coupling<T: Real>(
    space: &ProductSpace,
    h: &mut DMatrix<Cplx<T>>,
    p: usize,
    ops_p: &SpinOperatorSet<T>,
    q: usize,
    ops_q: &SpinOperatorSet<T>,
    t: &InteractionTensor<f64>,
) {
    let (cp, cq) = (ops_p.cartesian(), ops_q.cartesian());
    for a in 0..3 {
        for b in 0..3 {
            let v = t.get(a, b);
            if v != 0.0 {
                space.add_pair_op(h, p, cp[a], q, cq[b], creal(T::lit(v)));
            }
        }
    }
}

fn add_self_tensor<T: Real>(space: &ProductSpace, h: &mut DMatrix<Cplx<T>>, site: usize, ops: &SpinOperatorSet<T>, t: &InteractionTensor<f64>) {
    let c = ops.cartesian();
    for a in 0..3 {
        for b in 0..3 {
            let v = t.get(a, b);
            if v != 0.0 {
                let op = c[a] * c[b];
                space.add_site_op(h, site, &op, creal(T::lit(v)));
            }
        }
    }
}

fn zeeman(gamma: f64, b: &Vector3<f64>) -> [f64; 3] {
    [-gamma_field_mhz(gamma, b.x), -gamma_field_mhz(gamma, b.y), -gamma_field_mhz(gamma, b.z)]
}

/// Central system plus bath with the couplings that do not change between
/// clusters precomputed.
#[derive(Clone, Debug)]
pub struct SpinSystem {
    pub central: CentralSystem,
    pub bath: BathConfiguration,
    /// `A_i`, zero without an electron.
    pub hyperfine: Vec<InteractionTensor<f64>>,
    /// `P_0i` between the central nucleus and bath spin `i`.
    pub central_coupling: Vec<InteractionTensor<f64>>,
}

impl SpinSystem {
    pub fn new(central: CentralSystem, bath: BathConfiguration) -> Result<Self> {
        central.validate()?;
        bath.validate()?;
        let c = &central.central;
        let mut hyperfine = Vec::with_capacity(bath.len());
        let mut central_coupling = Vec::with_capacity(bath.len());
        for s in &bath.spins {
            hyperfine.push(match &central.electron {
                Some(e) => s.hyperfine_or_point_dipole(e.gamma)?,
                None => InteractionTensor::zero(),
            });
            central_coupling.push(dipolar_tensor(&c.position, &s.position, c.gamma, s.gamma)?);
        }
        Ok(SpinSystem { central, bath, hyperfine, central_coupling })
    }

    pub fn len(&self) -> usize {
        self.bath.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bath.is_empty()
    }

    pub fn pair(&self, i: usize, j: usize) -> Result<InteractionTensor<f64>> {
        let (a, b) = (&self.bath.spins[i], &self.bath.spins[j]);
        dipolar_tensor(&a.position, &b.position, a.gamma, b.gamma)
    }

    /// Dimensions of the central space: `[electron?, nucleus]`.
    pub fn central_dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(2);
        if let Some(e) = &self.central.electron {
            d.push(e.spin.dim());
        }
        d.push(self.central.central.spin.dim());
        d
    }

    pub fn with_field(&self, field_gauss: Vector3<f64>) -> Self {
        let mut s = self.clone();
        s.central.field_gauss = field_gauss;
        s
    }
}

/// Static Ising fields on a cluster from frozen spins outside it, MHz.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExternalField {
    /// Coefficient of `I_z` for each cluster spin, in cluster order.
    pub bath_z: Vec<f64>,
    /// Coefficient of `S_z`.
    pub electron_z: f64,
    /// Coefficient of `I_{0,z}`.
    pub central_z: f64,
}

/// `H_en` on `[electron?, nucleus]`.
pub fn build_central<T: Real>(system: &CentralSystem) -> HamiltonianMatrix<T> {
    let mut cache = OperatorCache::new();
    let mut dims = Vec::new();
    let mut labels = Vec::new();
    if let Some(e) = &system.electron {
        dims.push(e.spin.dim());
        labels.push("e".to_string());
    }
    dims.push(system.central.spin.dim());
    labels.push(system.central.isotope.clone());
    let space = ProductSpace::new(dims.clone());
    let mut h = DMatrix::zeros(space.dim(), space.dim());
    add_central_terms(&space, &mut h, system, &mut cache);
    HamiltonianMatrix { labels, dims, matrix: h }
}

fn add_central_terms<T: Real>(space: &ProductSpace, h: &mut DMatrix<Cplx<T>>, system: &CentralSystem, cache: &mut OperatorCache<T>) {
    let b = system.field_gauss;
    let n_site = usize::from(system.electron.is_some());
    let nuc = cache.get(system.central.spin).clone();
    add_field(space, h, n_site, &nuc, zeeman(system.central.gamma, &b));
    if let Some(q) = &system.central.quadrupole {
        add_self_tensor(space, h, n_site, &nuc, q);
    }
    if let Some(e) = &system.electron {
        let el = cache.get(e.spin).clone();
        let sz2 = &el.sz * &el.sz;
        space.add_site_op(h, 0, &sz2, creal(T::lit(e.zfs_mhz)));
        add_field(space, h, 0, &el, zeeman(e.gamma, &b));
        add_coupling(space, h, 0, &el, n_site, &nuc, &e.hyperfine_to_central);
    }
}

/// Cluster Hamiltonian on `[electron?, central, cluster…]`, optionally with
/// the mean field of frozen outer spins.
pub fn build_cluster<T: Real>(
    system: &SpinSystem,
    cluster: &[usize],
    external: Option<&ExternalField>,
) -> Result<HamiltonianMatrix<T>> {
    for &i in cluster {
        if i >= system.len() {
            return Err(Error::InvalidArgument(format!("cluster index {i} out of range for {} spins", system.len())));
        }
    }
    let cs = &system.central;
    let mut cache = OperatorCache::new();
    let mut dims = system.central_dims();
    let mut labels: Vec<String> = Vec::new();
    if cs.electron.is_some() {
        labels.push("e".into());
    }
    labels.push(cs.central.isotope.clone());
    let first = dims.len();
    for &i in cluster {
        let s = &system.bath.spins[i];
        dims.push(s.spin.dim());
        labels.push(format!("{}#{i}", s.isotope));
    }
    let space = ProductSpace::new(dims.clone());
    let mut h = DMatrix::zeros(space.dim(), space.dim());
    add_central_terms(&space, &mut h, cs, &mut cache);

    let n_site = first - 1;
    let nuc = cache.get(cs.central.spin).clone();
    let el = cs.electron.as_ref().map(|e| cache.get(e.spin).clone());
    let b = cs.field_gauss;
    for (k, &i) in cluster.iter().enumerate() {
        let site = first + k;
        let s = &system.bath.spins[i];
        let ops = cache.get(s.spin).clone();
        add_field(&space, &mut h, site, &ops, zeeman(s.gamma, &b));
        if let Some(q) = &s.quadrupole {
            add_self_tensor(&space, &mut h, site, &ops, q);
        }
        if let Some(el) = &el {
            add_coupling(&space, &mut h, 0, el, site, &ops, &system.hyperfine[i]);
        }
        add_coupling(&space, &mut h, n_site, &nuc, site, &ops, &system.central_coupling[i]);
        for (l, &j) in cluster.iter().enumerate().skip(k + 1) {
            let other = cache.get(system.bath.spins[j].spin).clone();
            add_coupling(&space, &mut h, site, &ops, first + l, &other, &system.pair(i, j)?);
        }
    }
    if let Some(ext) = external {
        if ext.bath_z.len() != cluster.len() {
            return Err(Error::InvalidArgument("external field length differs from cluster size".into()));
        }
        for (k, &f) in ext.bath_z.iter().enumerate() {
            if f != 0.0 {
                let ops = cache.get(system.bath.spins[cluster[k]].spin).clone();
                space.add_site_op(&mut h, first + k, &ops.sz, creal(T::lit(f)));
            }
        }
        if ext.central_z != 0.0 {
            space.add_site_op(&mut h, n_site, &nuc.sz, creal(T::lit(ext.central_z)));
        }
        if let (Some(el), true) = (&el, ext.electron_z != 0.0) {
            space.add_site_op(&mut h, 0, &el.sz, creal(T::lit(ext.electron_z)));
        }
    }
    Ok(HamiltonianMatrix { labels, dims, matrix: h })
}

/// Diabatic label `|m_s, m_I⟩` of a central eigenstate (`m_s = 0` without an
/// electron).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiabaticLabel {
    pub ms: f64,
    pub mi: f64,
    /// `|⟨product|eigen⟩|²`.
    pub overlap: f64,
}

/// Eigenstates of `H_en` with diabatic labels.
#[derive(Clone, Debug)]
pub struct CentralEigen<T: Real> {
    pub energies: Vec<T>,
    pub vectors: DMatrix<Cplx<T>>,
    pub labels: Vec<DiabaticLabel>,
    /// True when every eigenstate maps to a distinct product state.
    pub labels_unique: bool,
    electron: Option<SpinQuantum>,
    nucleus: SpinQuantum,
}

impl<T: Real> CentralEigen<T> {
    pub fn new(system: &CentralSystem) -> Self {
        let h = build_central::<T>(system);
        let (energies, mut vectors) = eigh(&h.matrix);
        fix_gauge(&mut vectors);
        let electron = system.electron.as_ref().map(|e| e.spin);
        let nucleus = system.central.spin;
        let dn = nucleus.dim();
        let n = energies.len();
        let mut labels = Vec::with_capacity(n);
        let mut used = vec![false; n];
        let mut unique = true;
        for c in 0..n {
            let (mut best, mut p_best) = (0, -1.0);
            for r in 0..n {
                let p = vectors[(r, c)].norm_sqr().to_f64_lossy();
                if p > p_best {
                    best = r;
                    p_best = p;
                }
            }
            unique &= !used[best];
            used[best] = true;
            let ms = electron.map_or(0.0, |e| e.projection(best / dn));
            labels.push(DiabaticLabel { ms, mi: nucleus.projection(best % dn), overlap: p_best });
        }
        CentralEigen { energies, vectors, labels, labels_unique: unique, electron, nucleus }
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    /// Eigenstate with maximal overlap with `|ms, mi⟩`; fails below 0.5.
    pub fn find(&self, ms: f64, mi: f64) -> Result<usize> {
        let dn = self.nucleus.dim();
        let ie = match self.electron {
            Some(e) => e.index_of(ms).ok_or_else(|| Error::Validation(format!("no electron level m_s={ms}")))?,
            None if ms == 0.0 => 0,
            None => return Err(Error::Validation(format!("no electron for m_s={ms}"))),
        };
        let inuc = self
            .nucleus
            .index_of(mi)
            .ok_or_else(|| Error::Validation(format!("no nuclear level m_I={mi}")))?;
        let row = ie * dn + inuc;
        let (mut best, mut p_best) = (0, -1.0);
        for c in 0..self.dim() {
            let p = self.vectors[(row, c)].norm_sqr().to_f64_lossy();
            if p > p_best {
                best = c;
                p_best = p;
            }
        }
        if p_best <= 0.5 {
            return Err(Error::Engine(format!(
                "no eigenstate has overlap > 0.5 with |m_s={ms}, m_I={mi}⟩ (best {p_best:.3})"
            )));
        }
        Ok(best)
    }

    pub fn find_label(&self, label: &DiabaticLabel) -> Result<usize> {
        self.find(label.ms, label.mi)
    }

    /// Matrix elements `⟨α|O|β⟩` of a central-space operator.
    pub fn matrix_elements(&self, op: &DMatrix<Cplx<T>>) -> DMatrix<Cplx<T>> {
        self.vectors.adjoint() * op * &self.vectors
    }
}

/// The two qubit levels inside a given electron manifold.
#[derive(Clone, Debug)]
pub struct QubitLevels<T: Real> {
    pub level_a: usize,
    pub level_b: usize,
    pub state_a: nalgebra::DVector<Cplx<T>>,
    pub state_b: nalgebra::DVector<Cplx<T>>,
}

impl<T: Real> QubitLevels<T> {
    pub fn identify(eigen: &CentralEigen<T>, ms: f64, projections: (f64, f64)) -> Result<Self> {
        let a = eigen.find(ms, projections.0)?;
        let b = eigen.find(ms, projections.1)?;
        if a == b {
            return Err(Error::Engine(format!("qubit levels m_I={} and m_I={} map to one eigenstate", projections.0, projections.1)));
        }
        Ok(QubitLevels {
            level_a: a,
            level_b: b,
            state_a: eigen.vectors.column(a).into_owned(),
            state_b: eigen.vectors.column(b).into_owned(),
        })
    }
}

/// What couples central eigenstates in the second-order sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Numerator {
    /// Full central–bath coupling `S·A_i·I_i + I₀·P_0i·I_i`.
    #[default]
    CentralBath,
    /// Bath-only terms; these have no matrix elements between different
    /// central eigenstates, so the correction vanishes.
    BathOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionOptions {
    pub order: u8,
    pub numerator: Numerator,
    pub degeneracy_threshold_mhz: f64,
}

impl Default for ConditionOptions {
    fn default() -> Self {
        ConditionOptions { order: 2, numerator: Numerator::CentralBath, degeneracy_threshold_mhz: 1e-6 }
    }
}

/// `Ĥ^(α) = energy + matrix` on the cluster space.
#[derive(Clone, Debug)]
pub struct ConditionedHamiltonian<T: Real> {
    pub energy: T,
    pub matrix: DMatrix<Cplx<T>>,
}

impl<T: Real> ConditionedHamiltonian<T> {
    pub fn full(&self) -> DMatrix<Cplx<T>> {
        let n = self.matrix.nrows();
        &self.matrix + DMatrix::identity(n, n) * creal(self.energy)
    }
}

/// Central-space coupling operators of one cluster, in the eigenbasis.
struct CouplingElements<T: Real> {
    /// `[spin][b]`: `⟨α|X_ib|β⟩`, `X_ib = Σ_a A_i,ab S_a + P_0i,ab I0_a`.
    x: Vec<[DMatrix<Cplx<T>>; 3]>,
}

fn coupling_elements<T: Real>(system: &SpinSystem, cluster: &[usize], eigen: &CentralEigen<T>) -> CouplingElements<T> {
    let cs = &system.central;
    let dims = system.central_dims();
    let space = ProductSpace::new(dims);
    let dc = space.dim();
    let nuc = SpinOperatorSet::<T>::new(cs.central.spin);
    let n_site = usize::from(cs.electron.is_some());
    let embed = |site: usize, op: &DMatrix<Cplx<T>>| {
        let mut m = DMatrix::zeros(dc, dc);
        space.add_site_op(&mut m, site, op, creal(T::one()));
        eigen.matrix_elements(&m)
    };
    let i0: Vec<DMatrix<Cplx<T>>> = nuc.cartesian().iter().map(|o| embed(n_site, o)).collect();
    let s: Option<Vec<DMatrix<Cplx<T>>>> = cs.electron.as_ref().map(|e| {
        let el = SpinOperatorSet::<T>::new(e.spin);
        el.cartesian().iter().map(|o| embed(0, o)).collect()
    });
    let x = cluster
        .iter()
        .map(|&i| {
            let build = |b: usize| {
                let mut m = DMatrix::zeros(dc, dc);
                for a in 0..3 {
                    let p = system.central_coupling[i].get(a, b);
                    if p != 0.0 {
                        m += &i0[a] * creal(T::lit(p));
                    }
                    if let Some(s) = &s {
                        let h = system.hyperfine[i].get(a, b);
                        if h != 0.0 {
                            m += &s[a] * creal(T::lit(h));
                        }
                    }
                }
                m
            };
            [build(0), build(1), build(2)]
        })
        .collect();
    CouplingElements { x }
}

/// Bath-only part of a cluster Hamiltonian (Zeeman, quadrupole, pairs and
/// optional outer mean field) on the cluster space.
pub fn bath_hamiltonian<T: Real>(
    system: &SpinSystem,
    cluster: &[usize],
    external: Option<&ExternalField>,
) -> Result<DMatrix<Cplx<T>>> {
    let mut cache = OperatorCache::new();
    let dims: Vec<usize> = cluster.iter().map(|&i| system.bath.spins[i].spin.dim()).collect();
    let space = ProductSpace::new(dims);
    let mut h = DMatrix::zeros(space.dim(), space.dim());
    let b = system.central.field_gauss;
    for (k, &i) in cluster.iter().enumerate() {
        let s = &system.bath.spins[i];
        let ops = cache.get(s.spin).clone();
        add_field(&space, &mut h, k, &ops, zeeman(s.gamma, &b));
        if let Some(q) = &s.quadrupole {
            add_self_tensor(&space, &mut h, k, &ops, q);
        }
        for (l, &j) in cluster.iter().enumerate().skip(k + 1) {
            let other = cache.get(system.bath.spins[j].spin).clone();
            add_coupling(&space, &mut h, k, &ops, l, &other, &system.pair(i, j)?);
        }
        if let Some(ext) = external {
            if ext.bath_z[k] != 0.0 {
                space.add_site_op(&mut h, k, &ops.sz, creal(T::lit(ext.bath_z[k])));
            }
        }
    }
    Ok(h)
}

/// Effective cluster Hamiltonians conditioned on central eigenstates.
///
/// Returns `Ĥ^(α)` for every `α` in `levels`; `external` adds the outer
/// mean field to the bath spins (its central part is not included here).
pub fn conditioned_hamiltonians<T: Real>(
    system: &SpinSystem,
    cluster: &[usize],
    eigen: &CentralEigen<T>,
    levels: &[usize],
    options: &ConditionOptions,
    external: Option<&ExternalField>,
) -> Result<Vec<ConditionedHamiltonian<T>>> {
    let h_bath = bath_hamiltonian::<T>(system, cluster, external)?;
    let x = coupling_elements(system, cluster, eigen);
    let mut cache = OperatorCache::new();
    let dims: Vec<usize> = cluster.iter().map(|&i| system.bath.spins[i].spin.dim()).collect();
    let space = ProductSpace::new(dims);
    let d = space.dim();
    // cluster operators I_ib
    let ops: Vec<[DMatrix<Cplx<T>>; 3]> = cluster
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let set = cache.get(system.bath.spins[i].spin).clone();
            let c = set.cartesian();
            let emb = |op: &DMatrix<Cplx<T>>| {
                let mut m = DMatrix::zeros(d, d);
                space.add_site_op(&mut m, k, op, creal(T::one()));
                m
            };
            [emb(c[0]), emb(c[1]), emb(c[2])]
        })
        .collect();
    let bath_op = |alpha: usize, beta: usize| {
        let mut m = DMatrix::<Cplx<T>>::zeros(d, d);
        for (k, xk) in x.x.iter().enumerate() {
            for b in 0..3 {
                let c = xk[b][(alpha, beta)];
                if c.norm_sqr() > T::zero() {
                    m += &ops[k][b] * c;
                }
            }
        }
        m
    };
    let mut out = Vec::with_capacity(levels.len());
    for &alpha in levels {
        let mut m = &h_bath + bath_op(alpha, alpha);
        if options.order >= 2 && options.numerator == Numerator::CentralBath {
            let ea = eigen.energies[alpha];
            for beta in 0..eigen.dim() {
                if beta == alpha {
                    continue;
                }
                let gap = ea - eigen.energies[beta];
                if gap.abs().to_f64_lossy() < options.degeneracy_threshold_mhz {
                    return Err(Error::Degenerate {
                        level: alpha,
                        other: beta,
                        gap: gap.abs().to_f64_lossy(),
                        threshold: options.degeneracy_threshold_mhz,
                    });
                }
                let o = bath_op(alpha, beta);
                if o.iter().all(|v| v.norm_sqr() == T::zero()) {
                    continue;
                }
                m += &o * o.adjoint() * creal(T::one() / gap);
            }
        }
        out.push(ConditionedHamiltonian { energy: eigen.energies[alpha], matrix: m });
    }
    Ok(out)
}

/// The two qubit-conditioned Hamiltonians `(Ĥ^(a), Ĥ^(b))`.
pub fn conditioned_hamiltonian<T: Real>(
    system: &SpinSystem,
    cluster: &[usize],
    eigen: &CentralEigen<T>,
    levels: &QubitLevels<T>,
    order: u8,
) -> Result<(ConditionedHamiltonian<T>, ConditionedHamiltonian<T>)> {
    let opts = ConditionOptions { order, ..Default::default() };
    let mut v = conditioned_hamiltonians(system, cluster, eigen, &[levels.level_a, levels.level_b], &opts, None)?;
    let b = v.pop().expect("two levels");
    let a = v.pop().expect("two levels");
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{BathSpin, ElectronState};
    use crate::constants::GAMMA_C13;
    use crate::couplings::flip_flop_amplitude;
    use crate::spin::kron;
    use rand::{Rng, SeedableRng};

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn first_shell() -> InteractionTensor<f64> {
        InteractionTensor::new(nalgebra::Matrix3::new(99.8, 0.0, 25.5, 0.0, 176.8, 0.0, 25.5, 0.0, 108.0)).unwrap()
    }

    fn nv_system(field_gauss: f64, a: InteractionTensor<f64>) -> CentralSystem {
        let c = BathSpin::carbon(v(0.0, 0.0, 0.154)).with_hyperfine(a);
        CentralSystem::nv(c, field_gauss, ElectronState::MsM1).unwrap()
    }

    #[test]
    fn bare_carbon_zeeman_levels() {
        let sys = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 500.0);
        let h = build_central::<f64>(&sys);
        let (e, _) = eigh(&h.matrix);
        let f = gamma_field_mhz(GAMMA_C13, 500.0);
        assert!((e[0] + f / 2.0).abs() < 1e-14 && (e[1] - f / 2.0).abs() < 1e-14);
    }

    #[test]
    fn zero_hyperfine_gives_product_states() {
        let h = build_central::<f64>(&nv_system(500.0, InteractionTensor::zero()));
        let off: f64 = (0..6).flat_map(|r| (0..6).map(move |c| (r, c))).filter(|(r, c)| r != c).map(|(r, c)| h.matrix[(r, c)].norm()).sum();
        assert_eq!(off, 0.0);
        let eig = CentralEigen::<f64>::new(&nv_system(500.0, InteractionTensor::zero()));
        assert!(eig.labels_unique);
        assert!(eig.labels.iter().all(|l| (l.overlap - 1.0).abs() < 1e-12));
    }

    #[test]
    fn electron_levels_cross_at_gslac() {
        // ms=0 and ms=−1 diabatic energies meet at D/|γe| ≈ 1028 G
        let h0 = build_central::<f64>(&nv_system(1027.0, InteractionTensor::zero()));
        let h1 = build_central::<f64>(&nv_system(1029.0, InteractionTensor::zero()));
        // index |ms=0, up⟩ = 2, |ms=−1, up⟩ = 4
        let d0 = h0.matrix[(4, 4)].re - h0.matrix[(2, 2)].re;
        let d1 = h1.matrix[(4, 4)].re - h1.matrix[(2, 2)].re;
        assert!(d0 > 0.0 && d1 < 0.0, "{d0} {d1}");
    }

    #[test]
    fn first_shell_hermitian_and_labelled() {
        for b in [500.0, 3000.0, 20000.0] {
            let sys = nv_system(b, first_shell());
            let h = build_central::<f64>(&sys);
            assert!(h.is_hermitian(1e-12));
            let eig = CentralEigen::<f64>::new(&sys);
            let q = QubitLevels::identify(&eig, -1.0, (0.5, -0.5)).unwrap();
            assert!((q.state_a.dotc(&q.state_b)).norm() < 1e-12);
        }
    }

    #[test]
    fn f32_build_matches_f64() {
        let sys = nv_system(500.0, first_shell());
        let a = build_central::<f32>(&sys);
        let b = build_central::<f64>(&sys);
        for (x, y) in a.matrix.iter().zip(b.matrix.iter()) {
            assert!((x.re as f64 - y.re).abs() < 1e-3 * y.norm().max(1.0));
        }
    }

    fn pair_system() -> SpinSystem {
        let central = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 500.0);
        let bath = BathConfiguration::from_spins(vec![
            BathSpin::carbon(v(0.3, 0.1, 0.4)),
            BathSpin::carbon(v(-0.5, 0.2, 0.1)),
            BathSpin::carbon(v(0.2, -0.6, -0.3)),
        ])
        .unwrap();
        SpinSystem::new(central, bath).unwrap()
    }

    #[test]
    fn empty_cluster_equals_central() {
        let sys = pair_system();
        let a = build_cluster::<f64>(&sys, &[], None).unwrap();
        let b = build_central::<f64>(&sys.central);
        assert_eq!(a.matrix, b.matrix);
    }

    #[test]
    fn uncoupled_single_spin_is_zeeman_sum() {
        let central = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 500.0);
        let mut far = BathSpin::carbon(v(0.0, 0.0, 1e6));
        far.gamma = GAMMA_C13;
        let sys = SpinSystem::new(central, BathConfiguration::from_spins(vec![far]).unwrap()).unwrap();
        let h = build_cluster::<f64>(&sys, &[0], None).unwrap();
        let f = gamma_field_mhz(GAMMA_C13, 500.0);
        let z = SpinOperatorSet::<f64>::new(SpinQuantum::HALF).sz;
        let id = DMatrix::identity(2, 2);
        let expected = (kron(&z, &id) + kron(&id, &z)) * creal(-f);
        assert!((h.matrix - expected).norm() < 1e-12);
    }

    #[test]
    fn flip_flop_element_of_equal_larmor_pair() {
        // central + one bath spin along z: ⟨↑↓|H|↓↑⟩ = (Pxx+Pyy)/4 = −P_zz/4
        let central = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 500.0);
        let sys = SpinSystem::new(central, BathConfiguration::from_spins(vec![BathSpin::carbon(v(0.0, 0.0, 0.3))]).unwrap()).unwrap();
        let h = build_cluster::<f64>(&sys, &[0], None).unwrap();
        let p = sys.central_coupling[0];
        assert!((h.matrix[(1, 2)].re - flip_flop_amplitude(&p) / 2.0).abs() < 1e-15);
        assert!((h.matrix[(1, 2)].re + p.zz() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn permuting_cluster_conjugates_hamiltonian() {
        let sys = pair_system();
        let h = build_cluster::<f64>(&sys, &[0, 1, 2], None).unwrap();
        let hp = build_cluster::<f64>(&sys, &[2, 0, 1], None).unwrap();
        // site order [c, 0, 1, 2] → [c, 2, 0, 1]
        let space = ProductSpace::new(vec![2; 4]);
        let n = space.dim();
        let perm = DMatrix::<Cplx<f64>>::from_fn(n, n, |r, c| {
            let d: Vec<usize> = (0..4).map(|s| space.digit(c, s)).collect();
            let target = space.index(&[d[0], d[3], d[1], d[2]]);
            if r == target { creal(1.0) } else { creal(0.0) }
        });
        assert!((&perm * &h.matrix * perm.adjoint() - hp.matrix).norm() < 1e-12);
    }

    #[test]
    fn random_clusters_hermitian() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let spins: Vec<BathSpin> = (0..3)
                .map(|_| BathSpin::carbon(v(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.3..1.0))))
                .collect();
            let c = nv_system(500.0, first_shell());
            let sys = SpinSystem::new(c, BathConfiguration::from_spins(spins).unwrap()).unwrap();
            let h = build_cluster::<f64>(&sys, &[0, 1, 2], None).unwrap();
            assert!(h.is_hermitian(1e-12));
            assert_eq!(h.dim(), 3 * 2 * 8);
        }
    }

    #[test]
    fn ising_coupling_has_no_second_order_term() {
        let c = nv_system(500.0, InteractionTensor::diagonal(0.0, 0.0, 0.2));
        let mut s = BathSpin::carbon(v(0.5, 0.0, 0.5));
        s.hyperfine = Some(InteractionTensor::diagonal(0.0, 0.0, 0.01));
        let mut sys = SpinSystem::new(c, BathConfiguration::from_spins(vec![s]).unwrap()).unwrap();
        sys.central_coupling[0] = InteractionTensor::diagonal(0.0, 0.0, 1e-3);
        let eig = CentralEigen::<f64>::new(&sys.central);
        let q = QubitLevels::identify(&eig, -1.0, (0.5, -0.5)).unwrap();
        let (a1, b1) = conditioned_hamiltonian(&sys, &[0], &eig, &q, 1).unwrap();
        let (a2, b2) = conditioned_hamiltonian(&sys, &[0], &eig, &q, 2).unwrap();
        assert!((a1.matrix - a2.matrix).norm() < 1e-15);
        assert!((b1.matrix - b2.matrix).norm() < 1e-15);
    }

    #[test]
    fn flip_flop_second_order_shift() {
        // bare central ¹³C plus a bath spin with pure flip-flop coupling:
        // level ↑ couples |↑↓⟩ to |↓↑⟩, giving a shift |σ/2|²/(E↑−E↓) on the
        // bath's |↓⟩ state.
        let central = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 500.0);
        let mut sys = SpinSystem::new(central, BathConfiguration::from_spins(vec![BathSpin::carbon(v(0.0, 0.0, 0.3))]).unwrap()).unwrap();
        let sigma = 1e-3;
        sys.central_coupling[0] = InteractionTensor::diagonal(sigma, sigma, 0.0);
        let eig = CentralEigen::<f64>::new(&sys.central);
        let q = QubitLevels::identify(&eig, 0.0, (0.5, -0.5)).unwrap();
        let (a1, b1) = conditioned_hamiltonian(&sys, &[0], &eig, &q, 1).unwrap();
        let (a2, b2) = conditioned_hamiltonian(&sys, &[0], &eig, &q, 2).unwrap();
        let gap = eig.energies[q.level_a] - eig.energies[q.level_b];
        let shift = (sigma / 2.0).powi(2) / gap;
        let da = a2.matrix - a1.matrix;
        let db = b2.matrix - b1.matrix;
        assert!((da[(1, 1)].re - shift).abs() < 1e-15 && da[(0, 0)].norm() < 1e-18);
        assert!((db[(0, 0)].re + shift).abs() < 1e-15 && db[(1, 1)].norm() < 1e-18);
    }

    #[test]
    fn gslac_degeneracy_is_reported() {
        // exact crossing of |0,↓⟩ and |−1,↓⟩ with an Ising-only tensor
        let a = InteractionTensor::diagonal(0.0, 0.0, 0.0);
        let b = crate::constants::NV_ZFS_MHZ / gamma_field_mhz(-crate::constants::GAMMA_ELECTRON, 1.0);
        let sys = nv_system(b, a);
        let spin_sys = SpinSystem::new(sys, BathConfiguration::from_spins(vec![BathSpin::carbon(v(1.0, 0.0, 1.0))]).unwrap()).unwrap();
        let eig = CentralEigen::<f64>::new(&spin_sys.central);
        let q = QubitLevels::identify(&eig, 0.0, (0.5, -0.5)).unwrap();
        let err = conditioned_hamiltonian(&spin_sys, &[0], &eig, &q, 2).unwrap_err();
        assert!(matches!(err, Error::Degenerate { .. }), "{err}");
    }

    #[test]
    fn dump_lists_nonzero_elements() {
        let sys = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 500.0);
        let mut buf = Vec::new();
        build_central::<f64>(&sys).dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
    }
}
