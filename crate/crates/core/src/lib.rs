//! Coherence of nuclear-spin qubits in dilute spin baths.
//!
//! The numerical core (spin operators, coupling tensors, Hamiltonians,
//! propagation, two-spin oracle) is generic over [`Real`]; bath handling,
//! cluster expansion, analysis and I/O run in `f64`. The aliases below fix
//! the scalar to `f64`.

pub mod analysis;
pub mod bath;
pub mod cce;
pub mod config;
pub mod constants;
pub mod couplings;
pub mod error;
pub mod hamiltonian;
pub mod io;
pub mod oracles;
pub mod pipeline;
pub mod propagation;
pub mod scalar;
pub mod spin;

pub use error::{Error, Result};
pub use scalar::{Cplx, Real};

pub type C64 = num_complex::Complex<f64>;
pub type Tensor = couplings::InteractionTensor<f64>;
pub type SpinOps = spin::SpinOperatorSet<f64>;
pub type HamiltonianMatrix = hamiltonian::HamiltonianMatrix<f64>;
pub type Propagator = propagation::Propagator<f64>;
