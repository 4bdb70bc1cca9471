//! Spin operators and product-space embedding.

use nalgebra::DMatrix;

use crate::scalar::{cplx, creal, Cplx, Real};

/// Spin quantum number stored as `2S` so half-integers are exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpinQuantum(u32);

impl SpinQuantum {
    pub const HALF: SpinQuantum = SpinQuantum(1);
    pub const ONE: SpinQuantum = SpinQuantum(2);

    pub fn from_twice(two_s: u32) -> Self {
        SpinQuantum(two_s)
    }

    /// Rounds `s` to the nearest half-integer.
    pub fn from_f64(s: f64) -> Option<Self> {
        let t = (2.0 * s).round();
        if !s.is_finite() || t < 0.0 || (2.0 * s - t).abs() > 1e-9 {
            return None;
        }
        Some(SpinQuantum(t as u32))
    }

    pub fn twice(self) -> u32 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 2.0
    }

    pub fn dim(self) -> usize {
        self.0 as usize + 1
    }

    /// Projection `m` of basis index `i` (descending order, index 0 is `m = S`).
    pub fn projection(self, i: usize) -> f64 {
        self.value() - i as f64
    }

    /// Basis index of projection `m`, if it exists.
    pub fn index_of(self, m: f64) -> Option<usize> {
        let i = self.value() - m;
        let r = i.round();
        if (i - r).abs() > 1e-9 || r < 0.0 || r as usize >= self.dim() {
            None
        } else {
            Some(r as usize)
        }
    }
}

impl std::fmt::Display for SpinQuantum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_multiple_of(2) {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}/2", self.0)
        }
    }
}

/// Dense spin matrices in the `|S, m⟩` basis, `m` descending.
#[derive(Clone, Debug)]
pub struct SpinOperatorSet<T: Real> {
    pub spin: SpinQuantum,
    pub sx: DMatrix<Cplx<T>>,
    pub sy: DMatrix<Cplx<T>>,
    pub sz: DMatrix<Cplx<T>>,
    pub sp: DMatrix<Cplx<T>>,
    pub sm: DMatrix<Cplx<T>>,
}

impl<T: Real> SpinOperatorSet<T> {
    pub fn new(spin: SpinQuantum) -> Self {
        let d = spin.dim();
        let s = spin.value();
        let mut sz = DMatrix::zeros(d, d);
        let mut sp = DMatrix::zeros(d, d);
        for i in 0..d {
            let m = spin.projection(i);
            sz[(i, i)] = creal(T::lit(m));
            if i + 1 < d {
                let lower = spin.projection(i + 1);
                sp[(i, i + 1)] = creal(T::lit((s * (s + 1.0) - lower * (lower + 1.0)).sqrt()));
            }
        }
        let sm = sp.adjoint();
        let half = creal(T::lit(0.5));
        let sx = (&sp + &sm) * half;
        let sy = (&sp - &sm) * cplx(T::zero(), T::lit(-0.5));
        SpinOperatorSet { spin, sx, sy, sz, sp, sm }
    }

    pub fn dim(&self) -> usize {
        self.spin.dim()
    }

    /// Cartesian components `[Sx, Sy, Sz]`.
    pub fn cartesian(&self) -> [&DMatrix<Cplx<T>>; 3] {
        [&self.sx, &self.sy, &self.sz]
    }
}

/// Ordered tensor-product space; site 0 is the most significant digit, which
/// matches `kron(A, B)` ordering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProductSpace {
    dims: Vec<usize>,
    strides: Vec<usize>,
    total: usize,
}

impl ProductSpace {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut strides = vec![1; dims.len()];
        for k in (0..dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * dims[k + 1];
        }
        let total = dims.iter().product();
        ProductSpace { dims, strides, total }
    }

    pub fn dim(&self) -> usize {
        self.total
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn sites(&self) -> usize {
        self.dims.len()
    }

    #[inline]
    pub fn digit(&self, index: usize, site: usize) -> usize {
        (index / self.strides[site]) % self.dims[site]
    }

    #[inline]
    pub fn stride(&self, site: usize) -> usize {
        self.strides[site]
    }

    /// `h += coeff · op_site`.
    pub fn add_site_op<T: Real>(
        &self,
        h: &mut DMatrix<Cplx<T>>,
        site: usize,
        op: &DMatrix<Cplx<T>>,
        coeff: Cplx<T>,
    ) {
        let zero = Cplx::<T>::new(T::zero(), T::zero());
        let stride = self.strides[site];
        for col in 0..self.total {
            let c = self.digit(col, site);
            let base = col - c * stride;
            for r in 0..self.dims[site] {
                let v = op[(r, c)];
                if v != zero {
                    h[(base + r * stride, col)] += coeff * v;
                }
            }
        }
    }

    /// `h += coeff · (a_p ⊗ b_q)` for distinct sites `p` and `q`.
    pub fn add_pair_op<T: Real>(
        &self,
        h: &mut DMatrix<Cplx<T>>,
        p: usize,
        a: &DMatrix<Cplx<T>>,
        q: usize,
        b: &DMatrix<Cplx<T>>,
        coeff: Cplx<T>,
    ) {
        assert_ne!(p, q, "pair operator needs distinct sites");
        let zero = Cplx::<T>::new(T::zero(), T::zero());
        let (sp, sq) = (self.strides[p], self.strides[q]);
        for col in 0..self.total {
            let cp = self.digit(col, p);
            let cq = self.digit(col, q);
            let base = col - cp * sp - cq * sq;
            for rp in 0..self.dims[p] {
                let va = a[(rp, cp)];
                if va == zero {
                    continue;
                }
                for rq in 0..self.dims[q] {
                    let vb = b[(rq, cq)];
                    if vb != zero {
                        h[(base + rp * sp + rq * sq, col)] += coeff * va * vb;
                    }
                }
            }
        }
    }

    /// Index of the product state with the given per-site digits.
    pub fn index(&self, digits: &[usize]) -> usize {
        digits.iter().zip(&self.strides).map(|(d, s)| d * s).sum()
    }
}

/// Dense Kronecker product.
pub fn kron<T: Real>(a: &DMatrix<Cplx<T>>, b: &DMatrix<Cplx<T>>) -> DMatrix<Cplx<T>> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}
