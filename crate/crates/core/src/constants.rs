//! Physical constants and unit conversions.
//!
//! Units used throughout the crate:
//! lengths in nm, times in ms, magnetic fields in gauss, couplings and
//! Hamiltonians in MHz (ordinary frequency, no 2π), gyromagnetic ratios in
//! rad·ms⁻¹·G⁻¹ with sign. A Hamiltonian `H` in MHz evolves as
//! `exp(-2πi·H·t·1e3)` for `t` in ms.

use std::f64::consts::PI;

/// Reduced Planck constant, J·s (CODATA 2018).
pub const HBAR: f64 = 1.054_571_817e-34;

/// Cycles accumulated per (MHz · ms).
pub const MHZ_MS: f64 = 1e3;

/// ¹³C: γ/2π = 10.7084 MHz/T.
pub const GAMMA_C13: f64 = 2.0 * PI * 1.070_84;
/// ¹⁴N: γ/2π = 3.077 MHz/T.
pub const GAMMA_N14: f64 = 2.0 * PI * 0.307_7;
/// ¹⁵N: γ/2π = −4.316 MHz/T.
pub const GAMMA_N15: f64 = -2.0 * PI * 0.431_6;
/// ¹H: γ/2π = 42.577 MHz/T.
pub const GAMMA_H1: f64 = 2.0 * PI * 4.257_7;
/// ²⁹Si: γ/2π = −8.465 MHz/T.
pub const GAMMA_SI29: f64 = -2.0 * PI * 0.846_5;
/// Free electron as used for the NV centre: γ/2π = −28024.95 MHz/T.
pub const GAMMA_ELECTRON: f64 = -2.0 * PI * 2_802.495;

/// NV ground-state zero-field splitting, MHz.
pub const NV_ZFS_MHZ: f64 = 2_880.0;

/// Diamond cubic lattice constant, nm.
pub const DIAMOND_LATTICE_NM: f64 = 0.357;

/// Natural ¹³C abundance.
pub const NATURAL_C13_ABUNDANCE: f64 = 0.011;

/// Dipolar prefactor `(μ₀/4π)·ħ·γ₁γ₂ / 2π` in MHz·nm³ for gyromagnetic
/// ratios in rad·ms⁻¹·G⁻¹.
///
/// `γ[rad/s/T] = 1e7·γ[rad/ms/G]`, `μ₀/4π = 1e-7`, `1 m³ = 1e27 nm³`.
pub fn dipolar_prefactor_mhz_nm3(gamma_1: f64, gamma_2: f64) -> f64 {
    1e-7 * HBAR * (gamma_1 * 1e7) * (gamma_2 * 1e7) / (2.0 * PI) * 1e27 * 1e-6
}

/// Larmor-type frequency `γ·B/2π` in MHz for `γ` in rad·ms⁻¹·G⁻¹ and `B` in G.
#[inline]
pub fn gamma_field_mhz(gamma: f64, field_gauss: f64) -> f64 {
    gamma * field_gauss / (2.0 * PI) / MHZ_MS
}

/// Known isotopes: (label, gyromagnetic ratio rad·ms⁻¹·G⁻¹, spin).
pub const ISOTOPES: &[(&str, f64, f64)] = &[
    ("13C", GAMMA_C13, 0.5),
    ("14N", GAMMA_N14, 1.0),
    ("15N", GAMMA_N15, 0.5),
    ("1H", GAMMA_H1, 0.5),
    ("29Si", GAMMA_SI29, 0.5),
];

pub fn isotope(label: &str) -> Option<(f64, f64)> {
    ISOTOPES
        .iter()
        .find(|(l, _, _)| *l == label)
        .map(|&(_, g, s)| (g, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn carbon_pair_prefactor_is_7_6_hz_nm3() {
        let g = dipolar_prefactor_mhz_nm3(GAMMA_C13, GAMMA_C13) * 1e6;
        assert!((g - 7.60).abs() < 0.01, "{g}");
    }

    #[test]
    fn electron_carbon_prefactor_is_19_9_khz_nm3() {
        let g = dipolar_prefactor_mhz_nm3(GAMMA_ELECTRON, GAMMA_C13).abs() * 1e3;
        assert!((g - 19.9).abs() < 0.05, "{g}");
    }

    #[test]
    fn carbon_larmor_at_50_mt() {
        // 10.7084 MHz/T * 0.05 T
        let f = gamma_field_mhz(GAMMA_C13, 500.0);
        assert!((f - 0.535_42).abs() < 1e-6);
    }
}
