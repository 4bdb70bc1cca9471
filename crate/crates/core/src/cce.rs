//! Cluster enumeration and the two expansion engines.
//!
//! `L(t)` is factorized as `L_∅ · Π_C L̃_C` over a hierarchically closed set
//! of connected clusters. The root `L_∅` is the central system evolving
//! alone (in the mean field of the whole bath for sampled states), and each
//! `L̃_C = L_C / Π_{C' ⊊ C} L̃_{C'}` with the root included among the
//! divisors. Conventional CCE conditions the cluster on the central
//! eigenstates; gCCE evolves central ⊗ cluster exactly.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Mutex;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::BathConfiguration;
pub use crate::bath::BathState;
use crate::constants::MHZ_MS;
use crate::error::{Error, Result};
use crate::hamiltonian::{
    build_cluster, conditioned_hamiltonians, CentralEigen, ConditionOptions, ExternalField, SpinSystem,
};
use crate::propagation::{
    central_pulses, qubit_frame, BathInit, CentralPulses, CoherenceTrace, EigenCache, PulseAxis,
    PulseSequence, PulseTarget, QubitFrame, SequenceRunner,
};
use crate::spin::SpinOperatorSet;
use crate::C64;

/// Bath-state spaces up to this size are enumerated instead of sampled.
pub const EXHAUSTIVE_LIMIT: usize = 4096;

/// Default divergence guard on `|L̃|`.
pub const GUARD_THRESHOLD: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cluster {
    indices: Vec<usize>,
}

impl Cluster {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::InvalidArgument("cluster must contain at least one spin".into()));
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!("repeated spin in cluster {indices:?}")));
        }
        Ok(Cluster { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn order(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSet {
    /// `by_order[k - 1]` holds the clusters of order `k`, sorted.
    by_order: Vec<Vec<Cluster>>,
    pub connectivity_radius: f64,
    pub caps: Option<Vec<usize>>,
}

impl ClusterSet {
    pub fn max_order(&self) -> usize {
        self.by_order.len()
    }

    pub fn order(&self, k: usize) -> &[Cluster] {
        k.checked_sub(1).and_then(|i| self.by_order.get(i)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn counts(&self) -> Vec<usize> {
        self.by_order.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.by_order.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clusters by increasing order, lexicographic within an order.
    pub fn iter(&self) -> impl Iterator<Item = &Cluster> {
        self.by_order.iter().flatten()
    }

    /// Every connected proper subset of every cluster is present.
    pub fn is_closed(&self, bath: &BathConfiguration) -> bool {
        let adj = adjacency(bath, self.connectivity_radius);
        let present: HashSet<&[usize]> = self.iter().map(|c| c.indices()).collect();
        self.iter().all(|c| {
            proper_subsets(c.indices())
                .into_iter()
                .filter(|s| connected(s, &adj))
                .all(|s| present.contains(s.as_slice()))
        })
    }
}

fn adjacency(bath: &BathConfiguration, radius: f64) -> Vec<Vec<usize>> {
    let n = bath.len();
    let r2 = radius * radius;
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if (bath.spins[i].position - bath.spins[j].position).norm_squared() <= r2 {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    adj
}

fn connected(set: &[usize], adj: &[Vec<usize>]) -> bool {
    if set.len() <= 1 {
        return true;
    }
    let mut seen = vec![false; set.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(k) = stack.pop() {
        for (l, &j) in set.iter().enumerate() {
            if !seen[l] && adj[set[k]].binary_search(&j).is_ok() {
                seen[l] = true;
                stack.push(l);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Non-empty proper subsets, each sorted.
fn proper_subsets(set: &[usize]) -> Vec<Vec<usize>> {
    let n = set.len();
    (1..(1usize << n) - 1)
        .map(|mask| (0..n).filter(|b| mask >> b & 1 == 1).map(|b| set[b]).collect())
        .collect()
}

fn internal_strength(bath: &BathConfiguration, set: &[usize]) -> f64 {
    let mut s = 0.0;
    for (k, &i) in set.iter().enumerate() {
        for &j in &set[k + 1..] {
            let (a, b) = (&bath.spins[i], &bath.spins[j]);
            if let Ok(p) = crate::couplings::dipolar_tensor(&a.position, &b.position, a.gamma, b.gamma) {
                s += p.zz().abs();
            }
        }
    }
    s
}

/// All connected clusters up to `max_order` under `radius` (nm).
///
/// Order `k` is grown from the kept clusters of order `k − 1`; a candidate is
/// kept only if all its connected `(k − 1)`-subsets were kept. With
/// `caps[k − 1]` set, the strongest clusters by `Σ |P_ij,zz|` survive, ties
/// going to the lexicographically smaller index list.
pub fn enumerate_clusters(
    bath: &BathConfiguration,
    max_order: usize,
    radius: f64,
    caps: Option<&[usize]>,
) -> Result<ClusterSet> {
    if max_order == 0 {
        return Err(Error::InvalidArgument("max_order must be at least 1".into()));
    }
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("connectivity radius {radius} nm must be non-negative")));
    }
    let adj = adjacency(bath, radius);
    let cap = |k: usize| caps.and_then(|c| c.get(k - 1).copied()).unwrap_or(usize::MAX);
    let rank = |mut v: Vec<Vec<usize>>, k: usize| -> Vec<Vec<usize>> {
        let limit = cap(k);
        if v.len() > limit {
            let mut scored: Vec<(f64, Vec<usize>)> = v.into_iter().map(|c| (internal_strength(bath, &c), c)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            scored.truncate(limit);
            v = scored.into_iter().map(|(_, c)| c).collect();
            v.sort();
        }
        v
    };

    let mut by_order: Vec<Vec<Vec<usize>>> = vec![rank((0..bath.len()).map(|i| vec![i]).collect(), 1)];
    for k in 2..=max_order {
        let prev = &by_order[k - 2];
        let kept: HashSet<&[usize]> = prev.iter().map(Vec::as_slice).collect();
        let mut candidates = BTreeSet::new();
        for c in prev {
            for &i in c {
                for &j in &adj[i] {
                    if c.binary_search(&j).is_err() {
                        let mut next = c.clone();
                        let pos = next.partition_point(|&x| x < j);
                        next.insert(pos, j);
                        candidates.insert(next);
                    }
                }
            }
        }
        let closed: Vec<Vec<usize>> = candidates
            .into_iter()
            .filter(|c| {
                (0..c.len()).all(|skip| {
                    let sub: Vec<usize> = c.iter().enumerate().filter(|&(l, _)| l != skip).map(|(_, &x)| x).collect();
                    !connected(&sub, &adj) || kept.contains(sub.as_slice())
                })
            })
            .collect();
        let next = rank(closed, k);
        if next.is_empty() {
            break;
        }
        by_order.push(next);
    }
    let by_order = by_order
        .into_iter()
        .map(|v| v.into_iter().map(|indices| Cluster { indices }).collect())
        .collect();
    Ok(ClusterSet { by_order, connectivity_radius: radius, caps: caps.map(<[usize]>::to_vec) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Exhaustive when the state space has at most [`EXHAUSTIVE_LIMIT`] states.
    Auto,
    MonteCarlo,
    Exhaustive,
}

/// Number of product states of the bath, `None` on overflow.
pub fn state_space_size(bath: &BathConfiguration) -> Option<usize> {
    bath.spins.iter().try_fold(1usize, |acc, s| acc.checked_mul(s.spin.dim()))
}

/// Uniform product states of the infinite-temperature ensemble.
///
/// Exhaustive enumeration lists states with spin 0 as the most significant
/// digit and `m` descending; Monte Carlo draws each projection independently
/// from a ChaCha8 stream seeded with `seed`.
pub fn sample_bath_states(
    bath: &BathConfiguration,
    n_samples: usize,
    seed: u64,
    mode: SamplingMode,
) -> Result<Vec<BathState>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let size = state_space_size(bath);
    let exhaustive = match mode {
        SamplingMode::Exhaustive => match size {
            Some(n) if n <= 1 << 24 => true,
            _ => return Err(Error::Capacity { dimension: size.unwrap_or(usize::MAX), capacity: 1 << 24 }),
        },
        SamplingMode::Auto => size.is_some_and(|n| n <= EXHAUSTIVE_LIMIT),
        SamplingMode::MonteCarlo => false,
    };
    if exhaustive {
        let n = size.expect("checked");
        let dims: Vec<usize> = bath.spins.iter().map(|s| s.spin.dim()).collect();
        return Ok((0..n)
            .map(|mut idx| {
                let mut m = vec![0.0; dims.len()];
                for k in (0..dims.len()).rev() {
                    m[k] = bath.spins[k].spin.projection(idx % dims[k]);
                    idx /= dims[k];
                }
                BathState::Product(m)
            })
            .collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_samples)
        .map(|_| {
            BathState::Product(
                bath.spins.iter().map(|s| s.spin.projection(rng.random_range(0..s.spin.dim()))).collect(),
            )
        })
        .collect())
}

/// Static Ising field of the spins outside `cluster`, frozen in `state`.
///
/// Cluster spin `i` sees `Σ_{k∉C} m_k P_ik,zz`; the electron sees
/// `Σ_{k∉C} m_k A_k,zz` and the central nucleus `Σ_{k∉C} m_k P_0k,zz`.
pub fn mean_field_correction(system: &SpinSystem, cluster: &[usize], state: &BathState) -> Result<ExternalField> {
    let BathState::Product(m) = state else {
        return Err(Error::InvalidArgument("mean field needs a product bath state".into()));
    };
    state.validate(&system.bath)?;
    let inside: HashSet<usize> = cluster.iter().copied().collect();
    let mut ext = ExternalField { bath_z: vec![0.0; cluster.len()], electron_z: 0.0, central_z: 0.0 };
    for k in (0..system.len()).filter(|k| !inside.contains(k)) {
        if m[k] == 0.0 {
            continue;
        }
        ext.electron_z += m[k] * system.hyperfine[k].zz();
        ext.central_z += m[k] * system.central_coupling[k].zz();
        for (l, &i) in cluster.iter().enumerate() {
            ext.bath_z[l] += m[k] * system.pair(i, k)?.zz();
        }
    }
    Ok(ext)
}

/// `P_ij,zz` for all pairs, so per-cluster mean fields are `O(|C|)`.
struct MeanFieldTable {
    pair_zz: DMatrix<f64>,
}

struct SampleField {
    m: Vec<f64>,
    bath: Vec<f64>,
    electron: f64,
    central: f64,
}

impl MeanFieldTable {
    fn new(system: &SpinSystem) -> Result<Self> {
        let n = system.len();
        let mut pair_zz = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let v = system.pair(i, j)?.zz();
                pair_zz[(i, j)] = v;
                pair_zz[(j, i)] = v;
            }
        }
        Ok(MeanFieldTable { pair_zz })
    }

    fn totals(&self, system: &SpinSystem, m: &[f64]) -> SampleField {
        let mv = nalgebra::DVector::from_column_slice(m);
        let bath = (&self.pair_zz * &mv).as_slice().to_vec();
        let electron = m.iter().zip(&system.hyperfine).map(|(x, a)| x * a.zz()).sum();
        let central = m.iter().zip(&system.central_coupling).map(|(x, p)| x * p.zz()).sum();
        SampleField { m: m.to_vec(), bath, electron, central }
    }

    fn outside(&self, system: &SpinSystem, f: &SampleField, cluster: &[usize]) -> ExternalField {
        let mut ext = ExternalField {
            bath_z: cluster.iter().map(|&i| f.bath[i]).collect(),
            electron_z: f.electron,
            central_z: f.central,
        };
        for (l, &i) in cluster.iter().enumerate() {
            ext.electron_z -= f.m[i] * system.hyperfine[i].zz();
            ext.central_z -= f.m[i] * system.central_coupling[i].zz();
            for &j in cluster {
                if j != i {
                    ext.bath_z[l] -= f.m[j] * self.pair_zz[(i, j)];
                }
            }
        }
        ext
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cce,
    Gcce,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cce" => Ok(Method::Cce),
            "gcce" => Ok(Method::Gcce),
            _ => Err(Error::InvalidArgument(format!("unknown method '{s}' (expected cce or gcce)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Cce => "cce",
            Method::Gcce => "gcce",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineOptions {
    pub method: Method,
    pub condition: ConditionOptions,
    pub guard_threshold: f64,
    /// Frozen outer spins act on sampled clusters.
    pub mean_field: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            method: Method::Gcce,
            condition: ConditionOptions::default(),
            guard_threshold: GUARD_THRESHOLD,
            mean_field: true,
        }
    }
}

/// Bath ensemble the expansion is averaged over.
#[derive(Clone, Debug, PartialEq)]
pub enum Ensemble {
    /// Maximally mixed bath, every cluster traced exactly.
    Thermal,
    /// Mean over product states.
    States(Vec<BathState>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub clusters_per_order: Vec<usize>,
    /// Clusters whose correction was clamped by the divergence guard,
    /// summed over samples.
    pub clamps: usize,
    /// `‖L^(k) − L^(k−1)‖_∞` for `k = 1..=max_order`, with `L^(0) = L_∅`.
    pub order_change: Vec<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct CceResult {
    pub trace: CoherenceTrace,
    /// Truncations `L^(k)`, `k = 1..=max_order`.
    pub orders: Vec<CoherenceTrace>,
    /// Per-sample `L(t)` (one entry for the thermal ensemble).
    pub samples: Vec<Vec<C64>>,
    pub diagnostics: Diagnostics,
}

/// Label sequence of one CCE branch through the pulse sequence.
#[derive(Clone, Debug)]
struct Branch {
    labels: Vec<usize>,
    amplitude: C64,
}

/// The two branches, `a` ending on the read-out level `a`.
#[derive(Clone, Debug)]
struct BranchPlan {
    a: Branch,
    b: Branch,
    levels: Vec<usize>,
}

fn follow(start: usize, seq: &PulseSequence, pulses: &CentralPulses<f64>) -> Result<Branch> {
    let mut labels = vec![start];
    let mut amplitude = C64::new(1.0, 0.0);
    let mut cur = start;
    for e in &seq.events {
        let p = match e.target {
            PulseTarget::Central => &pulses.nuclear_eig,
            PulseTarget::Electron => pulses
                .electron_eig
                .as_ref()
                .ok_or_else(|| Error::Validation("sequence has electron pulses but no electron pulse operator".into()))?,
        };
        let col = p.column(cur);
        let next = (0..col.len())
            .find(|&r| col[r].norm_sqr() > 0.5)
            .ok_or_else(|| Error::Engine(format!("pulse leaves level {cur} without a target")))?;
        amplitude *= col[next];
        cur = next;
        labels.push(cur);
    }
    Ok(Branch { labels, amplitude })
}

/// Shared state of an expansion run.
pub struct Engine<'a> {
    system: &'a SpinSystem,
    seq: &'a PulseSequence,
    times: Vec<f64>,
    options: EngineOptions,
    eigen: CentralEigen<f64>,
    pulses: CentralPulses<f64>,
    frame: QubitFrame<f64>,
    plan: Option<BranchPlan>,
    /// `⟨α|S_z|α⟩` and `⟨α|I_0z|α⟩` in the central eigenbasis.
    sz_diag: Vec<f64>,
    iz_diag: Vec<f64>,
}

impl<'a> Engine<'a> {
    pub fn new(system: &'a SpinSystem, seq: &'a PulseSequence, times: &[f64], options: EngineOptions) -> Result<Self> {
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidArgument("times must be finite and non-negative".into()));
        }
        if !(options.guard_threshold >= 0.0) {
            return Err(Error::InvalidArgument("guard threshold must be non-negative".into()));
        }
        let eigen = CentralEigen::<f64>::new(&system.central);
        let axis = seq
            .events
            .iter()
            .find(|e| e.target == PulseTarget::Central)
            .map(|e| e.axis)
            .unwrap_or(PulseAxis::X);
        let pulses = central_pulses(&system.central, &eigen, axis)?;
        let frame = qubit_frame(&system.central, &eigen, seq)?;
        let plan = match options.method {
            Method::Cce => Some(Self::plan(system, &eigen, &pulses, seq)?),
            Method::Gcce => None,
        };

        let dims = system.central_dims();
        let space = crate::spin::ProductSpace::new(dims.clone());
        let diag_of = |site: usize, dim: usize| {
            let ops = SpinOperatorSet::<f64>::new(crate::spin::SpinQuantum::from_twice(dim as u32 - 1));
            let mut m = DMatrix::zeros(space.dim(), space.dim());
            space.add_site_op(&mut m, site, &ops.sz, C64::new(1.0, 0.0));
            let e = eigen.matrix_elements(&m);
            (0..eigen.dim()).map(|k| e[(k, k)].re).collect::<Vec<f64>>()
        };
        let iz_diag = diag_of(dims.len() - 1, dims[dims.len() - 1]);
        let sz_diag = if system.central.electron.is_some() { diag_of(0, dims[0]) } else { vec![0.0; eigen.dim()] };
        for seg in seq.events.windows(2) {
            if seg[0].target == PulseTarget::Central && seg[1].target == PulseTarget::Central && seg[0].axis != seg[1].axis
            {
                return Err(Error::Validation("mixed central pulse axes are not supported".into()));
            }
        }
        Ok(Engine { system, seq, times: times.to_vec(), options, eigen, pulses, frame, plan, sz_diag, iz_diag })
    }

    fn plan(
        system: &SpinSystem,
        eigen: &CentralEigen<f64>,
        pulses: &CentralPulses<f64>,
        seq: &PulseSequence,
    ) -> Result<BranchPlan> {
        let proj = system.central.qubit_projections;
        let ms0 = system.central.electron_state.projection();
        let fin = crate::propagation::final_electron_state(system.central.electron_state, seq).projection();
        let (a0, b0) = (eigen.find(ms0, proj.0)?, eigen.find(ms0, proj.1)?);
        let (fa, fb) = (eigen.find(fin, proj.0)?, eigen.find(fin, proj.1)?);
        let x = follow(a0, seq, pulses)?;
        let y = follow(b0, seq, pulses)?;
        let (a, b) = match (*x.labels.last().unwrap(), *y.labels.last().unwrap()) {
            (p, q) if p == fa && q == fb => (x, y),
            (p, q) if p == fb && q == fa => (y, x),
            (p, q) => return Err(Error::Engine(format!("branches end on levels {p}, {q}; read-out pair is {fa}, {fb}"))),
        };
        let levels: BTreeSet<usize> = a.labels.iter().chain(&b.labels).copied().collect();
        Ok(BranchPlan { a, b, levels: levels.into_iter().collect() })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn eigen(&self) -> &CentralEigen<f64> {
        &self.eigen
    }

    /// Conditioned-Hamiltonian contribution `L_C(t)` (empty cluster allowed).
    pub fn cce_contribution(
        &self,
        cluster: &[usize],
        state: &BathState,
        external: Option<&ExternalField>,
    ) -> Result<Vec<C64>> {
        let plan = match &self.plan {
            Some(p) => p.clone(),
            None => Self::plan(self.system, &self.eigen, &self.pulses, self.seq)?,
        };
        let conds =
            conditioned_hamiltonians(self.system, cluster, &self.eigen, &plan.levels, &self.options.condition, external)?;
        let mut caches = HashMap::new();
        let mut energy = HashMap::new();
        for (&lvl, c) in plan.levels.iter().zip(&conds) {
            let shift = external.map_or(0.0, |e| e.electron_z * self.sz_diag[lvl] + e.central_z * self.iz_diag[lvl]);
            energy.insert(lvl, c.energy + shift);
            caches.insert(lvl, EigenCache::new(&c.matrix)?);
        }
        let d = conds.first().map_or(1, |c| c.matrix.nrows());
        let init = match state.basis_index(&self.system.bath, cluster) {
            Some(k) => {
                let mut v = DMatrix::zeros(d, 1);
                v[(k, 0)] = C64::new(1.0, 0.0);
                v
            }
            None => DMatrix::identity(d, d),
        };
        let weight = 1.0 / init.ncols() as f64;
        let evolve = |branch: &Branch, t: f64| {
            let mut w = init.clone();
            let mut phase = branch.amplitude;
            let mut last = 0.0;
            let bounds = self.seq.events.iter().map(|e| e.fraction * t).chain(std::iter::once(t));
            for (&lvl, end) in branch.labels.iter().zip(bounds) {
                let dt = end - last;
                last = end;
                if dt > 0.0 {
                    w = caches[&lvl].apply(dt, &w);
                    phase *= C64::from_polar(1.0, -2.0 * std::f64::consts::PI * energy[&lvl] * dt * MHZ_MS);
                }
            }
            (w, phase)
        };
        Ok(self
            .times
            .iter()
            .map(|&t| {
                let (wa, pa) = evolve(&plan.a, t);
                let (wb, pb) = evolve(&plan.b, t);
                let overlap: C64 = wa.iter().zip(wb.iter()).map(|(x, y)| x.conj() * y).sum();
                pa.conj() * pb * overlap * weight
            })
            .collect())
    }

    /// Exact central ⊗ cluster contribution `L_C(t)` (empty cluster allowed).
    pub fn gcce_contribution(
        &self,
        cluster: &[usize],
        state: &BathState,
        external: Option<&ExternalField>,
    ) -> Result<Vec<C64>> {
        self.gcce_with(cluster, state, external, None)
    }

    /// gCCE contribution reusing the diagonalization in `slot` when the
    /// outer field matches the one it was built for.
    fn gcce_with(
        &self,
        cluster: &[usize],
        state: &BathState,
        external: Option<&ExternalField>,
        slot: Option<&Mutex<Option<RunnerSlot>>>,
    ) -> Result<Vec<C64>> {
        let init = match state.basis_index(&self.system.bath, cluster) {
            Some(k) => BathInit::Basis(k),
            None => BathInit::Thermal,
        };
        let build = || -> Result<SequenceRunner<f64>> {
            let h = build_cluster::<f64>(self.system, cluster, external)?;
            SequenceRunner::new(&h.matrix, &self.pulses, &self.frame, self.seq)
        };
        let Some(slot) = slot else {
            return Ok(build()?.run(init, &self.times)?.values);
        };
        let key = outer_key(state, cluster, external.is_some());
        let mut guard = slot.lock().unwrap_or_else(|e| e.into_inner());
        if guard.as_ref().is_none_or(|s| s.key != key) {
            *guard = Some(RunnerSlot { key, runner: build()? });
        }
        let runner = &guard.as_ref().expect("filled above").runner;
        Ok(runner.run(init, &self.times)?.values)
    }

    fn contribution(
        &self,
        cluster: &[usize],
        state: &BathState,
        external: Option<&ExternalField>,
        slot: Option<&Mutex<Option<RunnerSlot>>>,
    ) -> Result<Vec<C64>> {
        let r = match self.options.method {
            Method::Cce => self.cce_contribution(cluster, state, external),
            Method::Gcce => self.gcce_with(cluster, state, external, slot),
        };
        r.map_err(|e| Error::InCluster { indices: cluster.to_vec(), source: Box::new(e) })
    }

    /// Expansion over `set`, averaged over `ensemble`.
    pub fn run(&self, set: &ClusterSet, ensemble: &Ensemble) -> Result<CceResult> {
        let states: Vec<BathState> = match ensemble {
            Ensemble::Thermal => vec![BathState::Thermal],
            Ensemble::States(s) if s.is_empty() => return Err(Error::InvalidArgument("empty bath ensemble".into())),
            Ensemble::States(s) => s.clone(),
        };
        for s in &states {
            s.validate(&self.system.bath)?;
        }
        for c in set.iter() {
            if c.indices().iter().any(|&i| i >= self.system.len()) {
                return Err(Error::InvalidArgument(format!("cluster {:?} out of range", c.indices())));
            }
        }
        let table = if self.options.mean_field && states.iter().any(|s| matches!(s, BathState::Product(_))) {
            Some(MeanFieldTable::new(self.system)?)
        } else {
            None
        };
        let clusters: Vec<&Cluster> = set.iter().collect();
        let subsets = subset_index(set);
        let nt = self.times.len();
        let max_order = set.max_order();

        let mut total = vec![C64::new(0.0, 0.0); nt];
        let mut root_total = vec![C64::new(0.0, 0.0); nt];
        let mut orders = vec![vec![C64::new(0.0, 0.0); nt]; max_order];
        let mut samples = Vec::with_capacity(states.len());
        let mut clamps = 0;
        // Small baths visited state by state share the outer field of a
        // cluster between many states; keep the last diagonalization.
        let reuse = self.options.method == Method::Gcce
            && states.len() > 1
            && state_space_size(&self.system.bath).is_some_and(|n| n <= EXHAUSTIVE_LIMIT);
        let slots: Vec<Mutex<Option<RunnerSlot>>> =
            if reuse { (0..=clusters.len()).map(|_| Mutex::new(None)).collect() } else { Vec::new() };
        let slot = |k: usize| slots.get(k);
        for state in &states {
            let field = match (&table, state) {
                (Some(t), BathState::Product(m)) => Some(t.totals(self.system, m)),
                _ => None,
            };
            let ext = |c: &[usize]| field.as_ref().map(|f| table.as_ref().unwrap().outside(self.system, f, c));
            let root = self.contribution(&[], state, ext(&[]).as_ref(), slot(clusters.len()))?;
            let contributions: Vec<Vec<C64>> = clusters
                .par_iter()
                .enumerate()
                .map(|(k, c)| self.contribution(c.indices(), state, ext(c.indices()).as_ref(), slot(k)))
                .collect::<Result<_>>()?;
            let a = assemble(&clusters, &subsets, &root, &contributions, self.options.guard_threshold)?;
            clamps += a.clamps;
            for (acc, v) in root_total.iter_mut().zip(&root) {
                *acc += v;
            }
            for (acc, v) in total.iter_mut().zip(&a.values) {
                *acc += v;
            }
            for (acc, ord) in orders.iter_mut().zip(&a.orders) {
                for (x, v) in acc.iter_mut().zip(ord) {
                    *x += v;
                }
            }
            samples.push(a.values);
        }
        let n = states.len() as f64;
        let scale = |v: Vec<C64>| v.into_iter().map(|x| x / n).collect::<Vec<_>>();
        let total = scale(total);
        let orders: Vec<Vec<C64>> = orders.into_iter().map(scale).collect();

        let mut order_change = Vec::with_capacity(max_order);
        let root_mean = scale(root_total);
        let mut prev = &root_mean;
        for o in &orders {
            order_change.push(prev.iter().zip(o).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max));
            prev = o;
        }

        let mut trace = CoherenceTrace::new(self.times.clone(), total)?
            .with_meta("method", self.options.method)
            .with_meta("sequence", &self.seq.name)
            .with_meta("max_order", max_order)
            .with_meta("clusters", set.len())
            .with_meta("samples", states.len())
            .with_meta("clamps", clamps);
        trace.metadata.insert("connectivity_radius_nm".into(), format!("{}", set.connectivity_radius));
        let orders = orders
            .into_iter()
            .enumerate()
            .map(|(k, v)| CoherenceTrace::new(self.times.clone(), v).map(|t| t.with_meta("order", k + 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CceResult {
            trace,
            orders,
            samples,
            diagnostics: Diagnostics {
                clusters_per_order: set.counts(),
                clamps,
                order_change,
                samples: states.len(),
            },
        })
    }
}

struct RunnerSlot {
    key: Vec<u64>,
    runner: SequenceRunner<f64>,
}

/// The outer field of a cluster is fixed by the projections of the spins
/// outside it.
fn outer_key(state: &BathState, cluster: &[usize], mean_field: bool) -> Vec<u64> {
    match state {
        BathState::Product(m) if mean_field => std::iter::once(1)
            .chain(m.iter().enumerate().filter(|(i, _)| !cluster.contains(i)).map(|(_, x)| x.to_bits()))
            .collect(),
        _ => Vec::new(),
    }
}

/// For each cluster (flat order), the flat ids of its proper sub-clusters
/// present in the set.
fn subset_index(set: &ClusterSet) -> Vec<Vec<usize>> {
    let ids: HashMap<&[usize], usize> = set.iter().enumerate().map(|(k, c)| (c.indices(), k)).collect();
    set.iter()
        .map(|c| proper_subsets(c.indices()).iter().filter_map(|s| ids.get(s.as_slice()).copied()).collect())
        .collect()
}

struct Assembled {
    values: Vec<C64>,
    orders: Vec<Vec<C64>>,
    clamps: usize,
}

/// Recursive tilde factors in log space with the divergence guard.
fn assemble(
    clusters: &[&Cluster],
    subsets: &[Vec<usize>],
    root: &[C64],
    contributions: &[Vec<C64>],
    guard: f64,
) -> Result<Assembled> {
    let nt = root.len();
    let ln_root: Vec<C64> = root.iter().map(|z| z.ln()).collect();
    let root_small: Vec<bool> = root.iter().map(|z| z.norm() < guard).collect();
    let mut ln_tilde: Vec<Vec<C64>> = Vec::with_capacity(clusters.len());
    let mut small: Vec<Vec<bool>> = Vec::with_capacity(clusters.len());
    let mut clamps = 0;
    for (k, l) in contributions.iter().enumerate() {
        if l.len() != nt {
            return Err(Error::Engine("contribution length differs from the time grid".into()));
        }
        let mut lt = vec![C64::new(0.0, 0.0); nt];
        let mut clamped = false;
        for t in 0..nt {
            if !clamped && (root_small[t] || subsets[k].iter().any(|&s| small[s][t])) {
                clamped = true;
                clamps += 1;
                log::debug!("clamping cluster {:?} from t index {t}", clusters[k].indices());
            }
            if clamped {
                continue;
            }
            let mut v = l[t].ln() - ln_root[t];
            for &s in &subsets[k] {
                v -= ln_tilde[s][t];
            }
            lt[t] = v;
        }
        small.push(lt.iter().map(|v| v.re < guard.ln()).collect());
        ln_tilde.push(lt);
    }
    let max_order = clusters.iter().map(|c| c.order()).max().unwrap_or(0);
    let mut acc = ln_root;
    let mut orders = Vec::with_capacity(max_order);
    for order in 1..=max_order {
        for (c, lt) in clusters.iter().zip(&ln_tilde) {
            if c.order() == order {
                for (a, v) in acc.iter_mut().zip(lt) {
                    *a += v;
                }
            }
        }
        orders.push(acc.iter().map(|v| v.exp()).collect::<Vec<C64>>());
    }
    let values = orders.last().cloned().unwrap_or_else(|| acc.iter().map(|v| v.exp()).collect());
    Ok(Assembled { values, orders, clamps })
}

/// Full simulation: enumerate, expand, average.
pub fn simulate(
    system: &SpinSystem,
    seq: &PulseSequence,
    times: &[f64],
    options: EngineOptions,
    set: &ClusterSet,
    ensemble: &Ensemble,
) -> Result<CceResult> {
    Engine::new(system, seq, times, options)?.run(set, ensemble)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{BathSpin, CentralSystem};
    use nalgebra::Vector3;

    fn bath_at(points: &[[f64; 3]]) -> BathConfiguration {
        BathConfiguration::from_spins(points.iter().map(|p| BathSpin::carbon(Vector3::from(*p))).collect()).unwrap()
    }

    #[test]
    fn distant_spins_have_no_pairs() {
        let bath = bath_at(&[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 5.0, 0.0]]);
        let set = enumerate_clusters(&bath, 2, 1.0, None).unwrap();
        assert_eq!(set.counts(), vec![3]);
    }

    #[test]
    fn close_triangle_gives_seven() {
        let bath = bath_at(&[[0.0, 0.0, 0.0], [0.3, 0.0, 0.0], [0.0, 0.3, 0.0]]);
        let set = enumerate_clusters(&bath, 3, 1.0, None).unwrap();
        assert_eq!(set.counts(), vec![3, 3, 1]);
        assert!(set.is_closed(&bath));
    }

    #[test]
    fn chain_skips_disconnected_pairs() {
        let bath = bath_at(&[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let set = enumerate_clusters(&bath, 3, 0.6, None).unwrap();
        assert_eq!(set.counts(), vec![3, 2, 1]);
        assert!(set.is_closed(&bath));
    }

    #[test]
    fn caps_keep_strongest_and_close_hierarchy() {
        let bath = bath_at(&[[0.0, 0.0, 0.0], [0.2, 0.0, 0.0], [1.0, 0.0, 0.0], [1.6, 0.0, 0.0]]);
        let set = enumerate_clusters(&bath, 3, 2.0, Some(&[usize::MAX, 1, 5])).unwrap();
        assert_eq!(set.order(2)[0].indices(), &[0, 1]);
        assert!(set.order(3).is_empty() || set.is_closed(&bath));
        assert_eq!(set.max_order(), 2);
    }

    #[test]
    fn zero_order_rejected() {
        assert!(enumerate_clusters(&BathConfiguration::empty(), 0, 1.0, None).is_err());
    }

    #[test]
    fn exhaustive_sampling_order_and_size() {
        let bath = bath_at(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let s = sample_bath_states(&bath, 1, 0, SamplingMode::Auto).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], BathState::Product(vec![0.5, 0.5]));
        assert_eq!(s[1], BathState::Product(vec![0.5, -0.5]));
        let mc = sample_bath_states(&bath, 10, 3, SamplingMode::MonteCarlo).unwrap();
        assert_eq!(mc, sample_bath_states(&bath, 10, 3, SamplingMode::MonteCarlo).unwrap());
        assert_eq!(mc.len(), 10);
    }

    #[test]
    fn mean_field_linear_in_projection() {
        let bath = bath_at(&[[0.0, 0.0, 1.0], [0.5, 0.0, 1.0], [0.0, 0.6, 1.2]]);
        let sys = SpinSystem::new(CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 500.0), bath).unwrap();
        let up = mean_field_correction(&sys, &[0], &BathState::Product(vec![0.5, 0.5, 0.5])).unwrap();
        let down = mean_field_correction(&sys, &[0], &BathState::Product(vec![0.5, -0.5, -0.5])).unwrap();
        assert!((up.bath_z[0] + down.bath_z[0]).abs() < 1e-15);
        assert!(up.bath_z[0] != 0.0);
        let all = mean_field_correction(&sys, &[0, 1, 2], &BathState::Product(vec![0.5, 0.5, 0.5])).unwrap();
        assert_eq!(all.bath_z, vec![0.0; 3]);
        assert_eq!(all.central_z, 0.0);

        let table = MeanFieldTable::new(&sys).unwrap();
        let m = vec![0.5, -0.5, 0.5];
        let fast = table.outside(&sys, &table.totals(&sys, &m), &[1, 2]);
        let slow = mean_field_correction(&sys, &[1, 2], &BathState::Product(m)).unwrap();
        for (a, b) in fast.bath_z.iter().zip(&slow.bath_z) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((fast.central_z - slow.central_z).abs() < 1e-15);
    }

    #[test]
    fn singletons_multiply() {
        let clusters = [Cluster::new(vec![0]).unwrap(), Cluster::new(vec![1]).unwrap()];
        let refs: Vec<&Cluster> = clusters.iter().collect();
        let root = vec![C64::new(1.0, 0.0); 2];
        let c = vec![vec![C64::new(0.9, 0.1), C64::new(0.5, 0.0)], vec![C64::new(0.8, 0.0), C64::new(0.0, 0.5)]];
        let a = assemble(&refs, &[vec![], vec![]], &root, &c, GUARD_THRESHOLD).unwrap();
        for t in 0..2 {
            assert!((a.values[t] - c[0][t] * c[1][t]).norm() < 1e-14);
        }
    }

    #[test]
    fn guard_clamps_from_crossing_on() {
        let clusters = [Cluster::new(vec![0]).unwrap(), Cluster::new(vec![0, 1]).unwrap()];
        let refs: Vec<&Cluster> = clusters.iter().collect();
        let root = vec![C64::new(1.0, 0.0); 3];
        let c = vec![
            vec![C64::new(1.0, 0.0), C64::new(1e-7, 0.0), C64::new(0.5, 0.0)],
            vec![C64::new(1.0, 0.0), C64::new(0.3, 0.0), C64::new(0.3, 0.0)],
        ];
        let a = assemble(&refs, &[vec![], vec![0]], &root, &c, GUARD_THRESHOLD).unwrap();
        assert_eq!(a.clamps, 1);
        assert!((a.values[1] - C64::new(1e-7, 0.0)).norm() < 1e-18);
        assert!((a.values[2] - C64::new(0.5, 0.0)).norm() < 1e-14);
    }
}
