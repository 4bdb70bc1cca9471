use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spinbath::bath::{BathConfiguration, BathSpin, CentralSystem, ElectronState};
use spinbath::cce::{
    enumerate_clusters, sample_bath_states, simulate, BathState, Engine, EngineOptions, Ensemble, Method,
    SamplingMode,
};
use spinbath::couplings::InteractionTensor;
use spinbath::hamiltonian::SpinSystem;
use spinbath::oracles::{exact_l, two_spin_system, two_spin_trace, ExactEnsemble, TwoSpinModel, EXACT_CAPACITY};
use spinbath::propagation::{time_grid, PulseSequence};
use spinbath::Error;

fn random_bath(n: usize, seed: u64, box_nm: f64, offset: Vector3<f64>) -> BathConfiguration {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spins: Vec<BathSpin> = Vec::new();
    while spins.len() < n {
        let p = offset + Vector3::from_fn(|_, _| rng.random_range(-box_nm..box_nm));
        if p.norm() > 0.3 && spins.iter().all(|s| (s.position - p).norm() > 0.25) {
            spins.push(BathSpin::carbon(p));
        }
    }
    BathConfiguration::from_spins(spins).unwrap()
}

fn full_set(n: usize) -> spinbath::cce::ClusterSet {
    let bath = BathConfiguration::from_spins(
        (0..n).map(|i| BathSpin::carbon(Vector3::new(i as f64 * 0.3 + 1.0, 0.0, 0.0))).collect(),
    )
    .unwrap();
    enumerate_clusters(&bath, n, 100.0, None).unwrap()
}

fn max_diff(a: &[spinbath::C64], b: &[spinbath::C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn gcce() -> EngineOptions {
    EngineOptions { method: Method::Gcce, ..Default::default() }
}

#[test]
fn gcce_reproduces_two_spin_expressions() {
    let model = TwoSpinModel::new(2.0, 2.6, 0.151);
    let system = two_spin_system(&model).unwrap();
    let times = time_grid(40.0, 201);
    let set = enumerate_clusters(&system.bath, 1, 1.0, None).unwrap();
    let r = simulate(&system, &PulseSequence::hahn(), &times, gcce(), &set, &Ensemble::Thermal).unwrap();
    let oracle = two_spin_trace(&model, &times);
    assert!(r.trace.max_abs_diff(&oracle).unwrap() < 1e-8);
}

#[test]
fn gcce_full_order_equals_exact_without_electron() {
    for seed in 0..3 {
        let bath = random_bath(4, seed, 0.8, Vector3::zeros());
        let central = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 300.0);
        let system = SpinSystem::new(central, bath).unwrap();
        let times = time_grid(5.0, 21);
        let seq = PulseSequence::hahn();
        let set = enumerate_clusters(&system.bath, 4, 10.0, None).unwrap();
        let r = simulate(&system, &seq, &times, gcce(), &set, &Ensemble::Thermal).unwrap();
        let exact = exact_l(&system, &seq, &times, &ExactEnsemble::Thermal, EXACT_CAPACITY).unwrap();
        assert!(r.trace.max_abs_diff(&exact).unwrap() < 1e-8, "seed {seed}");
        assert_eq!(r.diagnostics.clamps, 0);
    }
}

#[test]
fn gcce_full_order_equals_exact_with_electron_and_sampling() {
    let bath = random_bath(3, 11, 0.9, Vector3::new(0.0, 0.0, 1.5));
    let central = CentralSystem::nv(BathSpin::carbon(Vector3::new(0.5, 0.2, 0.9)), 500.0, ElectronState::MsM1).unwrap();
    let system = SpinSystem::new(central, bath).unwrap();
    let times = time_grid(2.0, 11);
    let seq = PulseSequence::hahn();
    let set = enumerate_clusters(&system.bath, 3, 10.0, None).unwrap();
    let states = sample_bath_states(&system.bath, 1, 0, SamplingMode::Auto).unwrap();
    assert_eq!(states.len(), 8);
    let r = simulate(&system, &seq, &times, gcce(), &set, &Ensemble::States(states.clone())).unwrap();
    let exact = exact_l(&system, &seq, &times, &ExactEnsemble::Sampled(states), EXACT_CAPACITY).unwrap();
    assert!(r.trace.max_abs_diff(&exact).unwrap() < 1e-8);
    // exhaustive product-state average equals the thermal trace
    let thermal = exact_l(&system, &seq, &times, &ExactEnsemble::Thermal, EXACT_CAPACITY).unwrap();
    assert!(r.trace.max_abs_diff(&thermal).unwrap() < 1e-10);
}

#[test]
fn electron_pulse_sequence_matches_exact() {
    let bath = random_bath(2, 5, 0.8, Vector3::new(0.0, 0.0, 1.2));
    let central = CentralSystem::nv(BathSpin::carbon(Vector3::new(0.4, 0.0, 0.8)), 400.0, ElectronState::MsM1).unwrap();
    let system = SpinSystem::new(central, bath).unwrap();
    let times = time_grid(1.0, 9);
    let seq = PulseSequence::hahn_with_electron(0.7).unwrap();
    let set = enumerate_clusters(&system.bath, 2, 10.0, None).unwrap();
    let r = simulate(&system, &seq, &times, gcce(), &set, &Ensemble::Thermal).unwrap();
    let exact = exact_l(&system, &seq, &times, &ExactEnsemble::Thermal, EXACT_CAPACITY).unwrap();
    assert!(r.trace.max_abs_diff(&exact).unwrap() < 1e-8);
}

/// With a purely secular central coupling the conditioned picture is exact.
fn secular_system(seed: u64, n: usize) -> SpinSystem {
    let bath = random_bath(n, seed, 0.7, Vector3::new(0.0, 0.0, 0.0));
    let central = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 200.0);
    let mut system = SpinSystem::new(central, bath).unwrap();
    for p in &mut system.central_coupling {
        *p = InteractionTensor::diagonal(0.0, 0.0, p.zz());
    }
    system
}

#[test]
fn cce_exact_for_secular_central_coupling() {
    for seed in 0..3 {
        let system = secular_system(seed, 3);
        let times = time_grid(4.0, 17);
        for seq in [PulseSequence::ramsey(), PulseSequence::hahn()] {
            let set = enumerate_clusters(&system.bath, 3, 10.0, None).unwrap();
            let opts = EngineOptions { method: Method::Cce, ..Default::default() };
            let r = simulate(&system, &seq, &times, opts, &set, &Ensemble::Thermal).unwrap();
            let exact = exact_l(&system, &seq, &times, &ExactEnsemble::Thermal, EXACT_CAPACITY).unwrap();
            assert!(r.trace.max_abs_diff(&exact).unwrap() < 1e-8, "seed {seed} {}", seq.name);
            let g = simulate(&system, &seq, &times, gcce(), &set, &Ensemble::Thermal).unwrap();
            assert!(r.trace.max_abs_diff(&g.trace).unwrap() < 1e-8);
        }
    }
}

#[test]
fn cce_exact_with_sampled_states() {
    let system = secular_system(7, 3);
    let times = time_grid(3.0, 13);
    let seq = PulseSequence::hahn();
    let set = enumerate_clusters(&system.bath, 3, 10.0, None).unwrap();
    let states = sample_bath_states(&system.bath, 1, 0, SamplingMode::Exhaustive).unwrap();
    let opts = EngineOptions { method: Method::Cce, ..Default::default() };
    let r = simulate(&system, &seq, &times, opts, &set, &Ensemble::States(states.clone())).unwrap();
    let exact = exact_l(&system, &seq, &times, &ExactEnsemble::Sampled(states), EXACT_CAPACITY).unwrap();
    assert!(r.trace.max_abs_diff(&exact).unwrap() < 1e-8);
}

#[test]
fn uncoupled_cluster_contributes_one() {
    let bath = BathConfiguration::from_spins(vec![BathSpin::carbon(Vector3::new(0.0, 0.0, 1.0))]).unwrap();
    let central = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 300.0);
    let mut system = SpinSystem::new(central, bath).unwrap();
    system.central_coupling[0] = InteractionTensor::zero();
    let times = time_grid(5.0, 11);
    let seq = PulseSequence::hahn();
    for method in [Method::Cce, Method::Gcce] {
        let e = Engine::new(&system, &seq, &times, EngineOptions { method, ..Default::default() }).unwrap();
        let l = match method {
            Method::Cce => e.cce_contribution(&[0], &BathState::Thermal, None).unwrap(),
            Method::Gcce => e.gcce_contribution(&[0], &BathState::Thermal, None).unwrap(),
        };
        assert!(l.iter().all(|z| (z - spinbath::C64::new(1.0, 0.0)).norm() < 1e-12));
    }
}

#[test]
fn ising_single_spin_refocuses() {
    let bath = BathConfiguration::from_spins(vec![BathSpin::carbon(Vector3::new(0.2, 0.1, 0.5))]).unwrap();
    let central = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 300.0);
    let mut system = SpinSystem::new(central, bath).unwrap();
    system.central_coupling[0] = InteractionTensor::diagonal(0.0, 0.0, system.central_coupling[0].zz());
    let times = time_grid(20.0, 21);
    let seq = PulseSequence::hahn();
    let e = Engine::new(&system, &seq, &times, EngineOptions { method: Method::Cce, ..Default::default() }).unwrap();
    let l = e.cce_contribution(&[0], &BathState::Thermal, None).unwrap();
    assert!(l.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
}

#[test]
fn empty_cluster_has_unit_modulus() {
    let central = CentralSystem::nv(BathSpin::carbon(Vector3::new(0.3, 0.3, 0.6)), 500.0, ElectronState::Ms0).unwrap();
    let system = SpinSystem::new(central, BathConfiguration::empty()).unwrap();
    let times = time_grid(1.0, 11);
    let seq = PulseSequence::hahn();
    let e = Engine::new(&system, &seq, &times, gcce()).unwrap();
    let l = e.gcce_contribution(&[], &BathState::Thermal, None).unwrap();
    assert!(l.iter().all(|z| (z.norm() - 1.0).abs() < 1e-10));
}

#[test]
fn distant_pair_correction_is_one() {
    // two spins far apart: CCE2 equals CCE1
    let bath = BathConfiguration::from_spins(vec![
        BathSpin::carbon(Vector3::new(0.0, 0.0, 0.6)),
        BathSpin::carbon(Vector3::new(0.0, 0.0, -60.0)),
    ])
    .unwrap();
    let central = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 300.0);
    let system = SpinSystem::new(central, bath).unwrap();
    let times = time_grid(5.0, 11);
    let seq = PulseSequence::hahn();
    let one = full_set(2);
    let r = simulate(&system, &seq, &times, gcce(), &one, &Ensemble::Thermal).unwrap();
    assert!(max_diff(&r.orders[0].values, &r.orders[1].values) < 1e-6);
}

#[test]
fn degeneracy_error_carries_cluster() {
    let bath = BathConfiguration::from_spins(vec![BathSpin::carbon(Vector3::new(0.0, 0.0, 0.6))]).unwrap();
    let central = CentralSystem::nv(BathSpin::carbon(Vector3::new(0.3, 0.0, 0.5)), 0.0, ElectronState::Ms0).unwrap();
    let system = SpinSystem::new(central, bath).unwrap();
    let set = enumerate_clusters(&system.bath, 1, 1.0, None).unwrap();
    let opts = EngineOptions { method: Method::Cce, ..Default::default() };
    let mut opts = opts;
    opts.condition.degeneracy_threshold_mhz = 1e3;
    let err = simulate(&system, &PulseSequence::hahn(), &[0.0, 0.1], opts, &set, &Ensemble::Thermal).unwrap_err();
    match err {
        Error::InCluster { source, .. } => assert!(matches!(*source, Error::Degenerate { .. })),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn mean_field_improves_on_frozen_outer_spin() {
    // 3-spin bath, pairs only: outer spin enters through the mean field
    let system = secular_system(3, 3);
    let times = time_grid(6.0, 25);
    let seq = PulseSequence::ramsey();
    let set = enumerate_clusters(&system.bath, 2, 10.0, None).unwrap();
    let states = sample_bath_states(&system.bath, 1, 0, SamplingMode::Auto).unwrap();
    let exact = exact_l(&system, &seq, &times, &ExactEnsemble::Sampled(states.clone()), EXACT_CAPACITY).unwrap();
    let run = |mf: bool| {
        let opts = EngineOptions { method: Method::Gcce, mean_field: mf, ..Default::default() };
        simulate(&system, &seq, &times, opts, &set, &Ensemble::States(states.clone())).unwrap()
    };
    let with = run(true).trace.max_abs_diff(&exact).unwrap();
    let without = run(false).trace.max_abs_diff(&exact).unwrap();
    assert!(with < without, "with {with:e} without {without:e}");
}

#[test]
fn deterministic_across_runs() {
    let bath = random_bath(8, 21, 1.2, Vector3::zeros());
    let central = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), 300.0);
    let system = SpinSystem::new(central, bath).unwrap();
    let times = time_grid(4.0, 9);
    let set = enumerate_clusters(&system.bath, 3, 0.9, Some(&[100, 10, 5])).unwrap();
    let states = sample_bath_states(&system.bath, 6, 9, SamplingMode::MonteCarlo).unwrap();
    let a = simulate(&system, &PulseSequence::hahn(), &times, gcce(), &set, &Ensemble::States(states.clone())).unwrap();
    let b = simulate(&system, &PulseSequence::hahn(), &times, gcce(), &set, &Ensemble::States(states)).unwrap();
    assert_eq!(a.trace.values, b.trace.values);
    assert_eq!(set, enumerate_clusters(&system.bath, 3, 0.9, Some(&[100, 10, 5])).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn full_order_telescopes(seed in 0u64..1000, field in 100.0f64..2000.0) {
        let bath = random_bath(3, seed, 0.8, Vector3::zeros());
        let central = CentralSystem::bare(BathSpin::carbon(Vector3::zeros()), field);
        let system = SpinSystem::new(central, bath).unwrap();
        let times = time_grid(2.0, 7);
        let seq = PulseSequence::hahn();
        let set = enumerate_clusters(&system.bath, 3, 10.0, None).unwrap();
        let r = simulate(&system, &seq, &times, gcce(), &set, &Ensemble::Thermal).unwrap();
        let exact = exact_l(&system, &seq, &times, &ExactEnsemble::Thermal, EXACT_CAPACITY).unwrap();
        prop_assert!(r.trace.max_abs_diff(&exact).unwrap() < 1e-8);
        prop_assert!((r.trace.values[0].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seeded(seed in 0u64..10_000) {
        let bath = random_bath(14, 1, 2.0, Vector3::zeros());
        let a = sample_bath_states(&bath, 5, seed, SamplingMode::Auto).unwrap();
        let b = sample_bath_states(&bath, 5, seed, SamplingMode::Auto).unwrap();
        prop_assert_eq!(a, b);
    }
}
