//! Pairwise interaction tensors: internuclear dipolar couplings, point-dipole
//! hyperfine couplings and hyperfine couplings integrated over a spin-density
//! grid.
//!
//! Every tensor is stored as an ordinary frequency in MHz. The coupling
//! between spin vectors `I` and `J` is `I·T·J`.

use nalgebra::{Matrix3, Vector3};

use crate::constants::dipolar_prefactor_mhz_nm3;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// 3×3 real coupling tensor in MHz.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InteractionTensor<T: Real> {
    pub components: Matrix3<T>,
}

impl<T: Real> InteractionTensor<T> {
    pub fn zero() -> Self {
        InteractionTensor { components: Matrix3::zeros() }
    }

    /// Wraps a matrix without checking symmetry.
    pub fn new_unchecked(components: Matrix3<T>) -> Self {
        InteractionTensor { components }
    }

    /// Symmetry is required to 1e-12 relative to the Frobenius norm.
    pub fn new(components: Matrix3<T>) -> Result<Self> {
        let t = InteractionTensor { components };
        if !t.is_symmetric(T::lit(1e-12).max(T::eps() * T::lit(16.0))) {
            return Err(Error::Validation(format!(
                "interaction tensor is not symmetric: {:?}",
                components
            )));
        }
        Ok(t)
    }

    pub fn diagonal(xx: T, yy: T, zz: T) -> Self {
        InteractionTensor { components: Matrix3::from_diagonal(&Vector3::new(xx, yy, zz)) }
    }

    pub fn from_row_slice(v: &[T; 9]) -> Self {
        InteractionTensor { components: Matrix3::from_row_slice(v) }
    }

    pub fn is_symmetric(&self, rel_tol: T) -> bool {
        let m = &self.components;
        let scale = m.norm();
        (m - m.transpose()).norm() <= rel_tol * scale
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> T {
        self.components[(a, b)]
    }

    pub fn zz(&self) -> T {
        self.components[(2, 2)]
    }

    pub fn trace(&self) -> T {
        self.components.trace()
    }

    pub fn norm(&self) -> T {
        self.components.norm()
    }

    pub fn scaled(&self, s: T) -> Self {
        InteractionTensor { components: self.components * s }
    }

    /// `R·T·Rᵀ`.
    pub fn rotated(&self, r: &Matrix3<T>) -> Self {
        InteractionTensor { components: r * self.components * r.transpose() }
    }

    pub fn cast<U: Real>(&self) -> InteractionTensor<U> {
        InteractionTensor { components: self.components.map(|x| U::lit(x.to_f64_lossy())) }
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(|x| x.is_zero())
    }
}

impl<T: Real> std::ops::Add for InteractionTensor<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        InteractionTensor { components: self.components + rhs.components }
    }
}

/// `(|r|²δ_ab − 3 r_a r_b)/|r|⁵`, the geometric part of the dipolar tensor.
fn dipolar_kernel<T: Real>(r: &Vector3<T>) -> Matrix3<T> {
    let r2 = r.norm_squared();
    let r5 = r2 * r2 * r2.sqrt();
    let three = T::lit(3.0);
    Matrix3::from_fn(|a, b| {
        let delta = if a == b { r2 } else { T::zero() };
        (delta - three * r[a] * r[b]) / r5
    })
}

/// Point-dipole coupling between two spins, MHz.
pub fn dipolar_tensor<T: Real>(
    r_i: &Vector3<T>,
    r_j: &Vector3<T>,
    gamma_i: f64,
    gamma_j: f64,
) -> Result<InteractionTensor<T>> {
    let r = r_j - r_i;
    if r.norm() <= T::zero() {
        return Err(Error::Singularity(format!(
            "coincident positions {:?}",
            r_i.map(|x| x.to_f64_lossy())
        )));
    }
    let k = T::lit(dipolar_prefactor_mhz_nm3(gamma_i, gamma_j));
    Ok(InteractionTensor { components: dipolar_kernel(&r) * k })
}

/// Hyperfine tensor of a nucleus at `pos` from an electron at the origin in
/// the point-dipole limit. Its `zz` element is `−(𝒢/r³)(3cos²Θ − 1)` with
/// `𝒢 = (μ₀/4π)ħγₑγₙ/2π`.
pub fn point_dipole_hyperfine<T: Real>(
    pos: &Vector3<T>,
    gamma_n: f64,
    gamma_e: f64,
) -> Result<InteractionTensor<T>> {
    if pos.norm() <= T::zero() {
        return Err(Error::Singularity("nucleus at the electron position".into()));
    }
    dipolar_tensor(&Vector3::zeros(), pos, gamma_e, gamma_n)
}

/// Spin-exchange coupling `σ = −P_zz` of a like-spin pair.
pub fn spin_exchange_sigma<T: Real>(p: &InteractionTensor<T>) -> T {
    -p.zz()
}

/// Secular flip-flop amplitude `(P_xx + P_yy)/2`, the coefficient of
/// `(I₊J₋ + I₋J₊)/2` after secular truncation.
pub fn flip_flop_amplitude<T: Real>(p: &InteractionTensor<T>) -> T {
    (p.get(0, 0) + p.get(1, 1)) * T::lit(0.5)
}

/// Electron spin density sampled on a regular (possibly skewed) grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinDensityGrid {
    /// Position of grid point `(0,0,0)`, nm.
    pub origin: Vector3<f64>,
    /// Columns are the step vectors along the three grid axes, nm.
    pub axes: Matrix3<f64>,
    pub counts: [usize; 3],
    /// Density in nm⁻³, x-major (`values[(i*ny + j)*nz + k]`).
    pub values: Vec<f64>,
    /// Declared integral of the density (number of unpaired electrons).
    pub normalization: f64,
}

impl SpinDensityGrid {
    pub fn new(
        origin: Vector3<f64>,
        axes: Matrix3<f64>,
        counts: [usize; 3],
        values: Vec<f64>,
        normalization: f64,
    ) -> Result<Self> {
        let n = counts.iter().product::<usize>();
        if values.len() != n {
            return Err(Error::Validation(format!(
                "density grid expects {n} values, got {}",
                values.len()
            )));
        }
        if axes.determinant().abs() <= 0.0 {
            return Err(Error::Validation("degenerate grid axes".into()));
        }
        if !(normalization > 0.0) {
            return Err(Error::Validation("density normalization must be positive".into()));
        }
        Ok(SpinDensityGrid { origin, axes, counts, values, normalization })
    }

    pub fn voxel_volume(&self) -> f64 {
        self.axes.determinant().abs()
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + self.axes * Vector3::new(i as f64, j as f64, k as f64)
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.voxel_volume()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut g = self.clone();
        g.values.iter_mut().for_each(|v| *v *= s);
        g
    }

    fn argmax(&self) -> Vector3<f64> {
        let (idx, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        let [_, ny, nz] = self.counts;
        self.point(idx / (ny * nz), (idx / nz) % ny, idx % nz)
    }
}

/// Options for [`grid_hyperfine`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridOptions {
    /// Nuclei closer than this to the density maximum are inside the core.
    pub core_radius_nm: f64,
    /// Inside the core: integrate anyway (skipping the nucleus voxel) when
    /// true, otherwise fail.
    pub regularize: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { core_radius_nm: 0.0, regularize: true }
    }
}

/// Dipolar hyperfine tensor from a spin density by midpoint quadrature.
///
/// Each grid point is the centre of a voxel; the voxel containing the
/// nucleus is skipped. The density is divided by its declared
/// normalization, so a unit-normalized point density reproduces
/// [`point_dipole_hyperfine`].
pub fn grid_hyperfine(
    pos: &Vector3<f64>,
    density: &SpinDensityGrid,
    gamma_n: f64,
    gamma_e: f64,
    options: GridOptions,
) -> Result<InteractionTensor<f64>> {
    if options.core_radius_nm > 0.0 && (pos - density.argmax()).norm() < options.core_radius_nm && !options.regularize {
        return Err(Error::Singularity(format!(
            "nucleus at {pos:?} lies inside the {} nm density core",
            options.core_radius_nm
        )));
    }
    let integral = density.integral();
    if integral.abs() < 0.99 * density.normalization {
        log::warn!(
            "spin density grid encloses {integral:.4} of declared {:.4}",
            density.normalization
        );
    }
    let inv_axes = density
        .axes
        .try_inverse()
        .ok_or_else(|| Error::Validation("degenerate grid axes".into()))?;
    // fractional grid coordinate of the nucleus; its voxel is the rounded one
    let frac = inv_axes * (pos - density.origin);
    let own = [frac.x.round(), frac.y.round(), frac.z.round()];

    let [nx, ny, nz] = density.counts;
    let mut acc = Matrix3::<f64>::zeros();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let rho = density.values[(i * ny + j) * nz + k];
                if rho == 0.0 {
                    continue;
                }
                if [i as f64, j as f64, k as f64] == own {
                    continue;
                }
                let r = density.point(i, j, k) - pos;
                acc += dipolar_kernel(&r) * rho;
            }
        }
    }
    let k = dipolar_prefactor_mhz_nm3(gamma_e, gamma_n) * density.voxel_volume() / density.normalization;
    Ok(InteractionTensor { components: acc * k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{dipolar_prefactor_mhz_nm3, GAMMA_C13, GAMMA_ELECTRON};
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn axial_pair_structure() {
        let p = dipolar_tensor(&v(0.0, 0.0, 0.0), &v(0.0, 0.0, 0.3), GAMMA_C13, GAMMA_C13).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    assert_eq!(p.get(a, b), 0.0);
                }
            }
        }
        assert!((p.get(0, 0) - p.get(1, 1)).abs() < 1e-18);
        assert!((p.get(0, 0) + p.zz() / 2.0).abs() < 1e-15);
        assert!(p.trace().abs() <= 1e-9 * p.norm());
    }

    #[test]
    fn nearest_neighbour_pair_is_about_4_2_khz() {
        let p = dipolar_tensor(&v(0.0, 0.0, 0.0), &v(0.0, 0.0, 0.154), GAMMA_C13, GAMMA_C13).unwrap();
        let g_nn = dipolar_prefactor_mhz_nm3(GAMMA_C13, GAMMA_C13);
        let expected = 2.0 * g_nn / 0.154f64.powi(3);
        assert!((p.zz().abs() - expected).abs() < 1e-15);
        assert!((p.zz().abs() * 1e3 - 4.16).abs() < 0.05, "{}", p.zz() * 1e3);
        // σ of the z-separated pair
        assert!((spin_exchange_sigma(&p) - expected).abs() < 1e-15);
    }

    #[test]
    fn coincident_positions_fail() {
        let r = v(0.1, 0.2, 0.3);
        assert!(matches!(dipolar_tensor(&r, &r, GAMMA_C13, GAMMA_C13), Err(Error::Singularity(_))));
        assert!(point_dipole_hyperfine(&Vector3::<f64>::zeros(), GAMMA_C13, GAMMA_ELECTRON).is_err());
    }

    #[test]
    fn argument_swap_is_symmetric() {
        let a = v(0.1, -0.3, 0.7);
        let b = v(-0.2, 0.5, 0.1);
        let p = dipolar_tensor(&a, &b, GAMMA_C13, GAMMA_C13).unwrap();
        let q = dipolar_tensor(&b, &a, GAMMA_C13, GAMMA_C13).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn point_dipole_angles() {
        let g = dipolar_prefactor_mhz_nm3(GAMMA_ELECTRON, GAMMA_C13);
        let r = 1.3;
        let magic = (1.0 / 3f64.sqrt()).acos();
        let at = |theta: f64, d: f64| {
            point_dipole_hyperfine(&v(d * theta.sin(), 0.0, d * theta.cos()), GAMMA_C13, GAMMA_ELECTRON).unwrap()
        };
        assert!(at(magic, r).zz().abs() < 1e-15);
        assert!((at(0.0, r).zz() - (-2.0 * g / r.powi(3))).abs() < 1e-15);
        let near = at(0.4, r);
        let far = at(0.4, 2.0 * r);
        for (x, y) in near.components.iter().zip(far.components.iter()) {
            assert!((x / 8.0 - y).abs() < 1e-15);
        }
        let theta: f64 = 1.1;
        let expected = -(g / r.powi(3)) * (3.0 * theta.cos().powi(2) - 1.0);
        assert!((at(theta, r).zz() - expected).abs() < 1e-14);
    }

    #[test]
    fn sigma_values() {
        let p = InteractionTensor::<f64>::diagonal(75.5e-6, 75.5e-6, -151e-6);
        assert!((spin_exchange_sigma(&p) - 151e-6).abs() < 1e-18);
        assert_eq!(spin_exchange_sigma(&InteractionTensor::<f64>::zero()), 0.0);
    }

    #[test]
    fn asymmetric_tensor_rejected() {
        let m = Matrix3::new(1.0, 2.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(InteractionTensor::new(m).is_err());
    }

    fn cubic_grid(n: usize, step: f64) -> (Vector3<f64>, Matrix3<f64>) {
        let half = (n as f64 - 1.0) / 2.0 * step;
        (v(-half, -half, -half), Matrix3::identity() * step)
    }

    #[test]
    fn delta_density_matches_point_dipole() {
        let (origin, axes) = cubic_grid(11, 0.05);
        let mut values = vec![0.0; 11 * 11 * 11];
        values[(5 * 11 + 5) * 11 + 5] = 1.0 / 0.05f64.powi(3);
        let grid = SpinDensityGrid::new(origin, axes, [11, 11, 11], values, 1.0).unwrap();
        let pos = v(0.0, 0.0, 2.0);
        let a = grid_hyperfine(&pos, &grid, GAMMA_C13, GAMMA_ELECTRON, GridOptions::default()).unwrap();
        let b = point_dipole_hyperfine(&pos, GAMMA_C13, GAMMA_ELECTRON).unwrap();
        assert!((a.components - b.components).norm() < 0.01 * b.norm());
    }

    fn gaussian_blobs(centres: &[Vector3<f64>], width: f64) -> SpinDensityGrid {
        let n = 31;
        let (origin, axes) = cubic_grid(n, 0.04);
        let mut values = Vec::with_capacity(n * n * n);
        let norm = (2.0 * std::f64::consts::PI * width * width).powf(1.5);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let p = origin + axes * v(i as f64, j as f64, k as f64);
                    let rho: f64 = centres
                        .iter()
                        .map(|c| (-(p - c).norm_squared() / (2.0 * width * width)).exp() / norm)
                        .sum();
                    values.push(rho);
                }
            }
        }
        SpinDensityGrid::new(origin, axes, [n, n, n], values, centres.len() as f64).unwrap()
    }

    #[test]
    fn symmetric_blobs_on_axis_have_no_xz_yz() {
        let grid = gaussian_blobs(&[v(0.0, 0.0, 0.2), v(0.0, 0.0, -0.2)], 0.06);
        let a = grid_hyperfine(&v(0.0, 0.0, 1.5), &grid, GAMMA_C13, GAMMA_ELECTRON, GridOptions::default()).unwrap();
        assert!(a.get(0, 2).abs() < 1e-12 * a.norm());
        assert!(a.get(1, 2).abs() < 1e-12 * a.norm());
    }

    #[test]
    fn density_scaling_is_linear() {
        let grid = gaussian_blobs(&[v(0.05, 0.0, 0.0)], 0.05);
        let pos = v(0.3, 0.4, 1.0);
        let a = grid_hyperfine(&pos, &grid, GAMMA_C13, GAMMA_ELECTRON, GridOptions::default()).unwrap();
        let b = grid_hyperfine(&pos, &grid.scaled(2.0), GAMMA_C13, GAMMA_ELECTRON, GridOptions::default()).unwrap();
        assert!((b.components - a.components * 2.0).norm() < 1e-12 * a.norm());
    }

    #[test]
    fn far_field_blob_converges_to_point_dipole() {
        let width = 0.05;
        let grid = gaussian_blobs(&[v(0.0, 0.0, 0.0)], width);
        let pos = v(0.0, 0.3, 0.5);
        assert!(pos.norm() >= 5.0 * width);
        let a = grid_hyperfine(&pos, &grid, GAMMA_C13, GAMMA_ELECTRON, GridOptions::default()).unwrap();
        let b = point_dipole_hyperfine(&pos, GAMMA_C13, GAMMA_ELECTRON).unwrap();
        assert!((a.components - b.components).norm() < 0.02 * b.norm());
    }

    #[test]
    fn core_policy() {
        let grid = gaussian_blobs(&[v(0.0, 0.0, 0.0)], 0.05);
        let opts = GridOptions { core_radius_nm: 0.2, regularize: false };
        assert!(grid_hyperfine(&v(0.0, 0.0, 0.1), &grid, GAMMA_C13, GAMMA_ELECTRON, opts).is_err());
        let opts = GridOptions { core_radius_nm: 0.2, regularize: true };
        assert!(grid_hyperfine(&v(0.0, 0.0, 0.1), &grid, GAMMA_C13, GAMMA_ELECTRON, opts).is_ok());
    }

    proptest! {
        #[test]
        fn rotational_covariance(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, angle in 0.0f64..std::f64::consts::TAU,
            x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.2f64..1.0,
        ) {
            let axis = v(ax, ay, az);
            prop_assume!(axis.norm() > 1e-3);
            let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let r = rot.matrix();
            let a = v(x, y, 0.0);
            let b = v(0.0, 0.0, z);
            let p = dipolar_tensor(&a, &b, GAMMA_C13, GAMMA_C13).unwrap();
            let q = dipolar_tensor(&(r * a), &(r * b), GAMMA_C13, GAMMA_C13).unwrap();
            let expect = p.rotated(r);
            prop_assert!((q.components - expect.components).norm() <= 1e-10 * p.norm());
            prop_assert!(q.is_symmetric(1e-12));
            prop_assert!(q.trace().abs() <= 1e-9 * q.norm());
        }
    }
}
