//! Band-stored square matrices and the O(n) kernels built on them:
//! Cholesky and LU factorisations, triangular and general solves,
//! log-determinants and precision-based Gaussian sampling.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Minimum absolute LU pivot before a system is declared singular.
const PIVOT_FLOOR: f64 = 1e-300;

/// Relative tolerance for the symmetry check in [`BandedMatrix::cholesky`].
const SYMMETRY_RTOL: f64 = 1e-12;

/// Square matrix with entries confined to `p` sub- and `q` super-diagonals.
///
/// Storage is one dense slab of `(p + q + 1) * n` scalars laid out
/// diagonal-by-diagonal: the entry `(i, j)` with offset `d = j - i`
/// lives at `bands[(d + p) * n + i]`. Slots outside the matrix stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    n: usize,
    p: usize,
    q: usize,
    bands: Vec<f64>,
}

impl BandedMatrix {
    /// Zero matrix with the given dimension and bandwidths.
    ///
    /// # Panics
    /// If `n == 0` or a bandwidth is not strictly below `n`.
    pub fn zeros(n: usize, p: usize, q: usize) -> Self {
        assert!(n > 0, "banded matrix dimension must be positive");
        assert!(p < n && q < n, "bandwidths must be below the dimension");
        BandedMatrix {
            n,
            p,
            q,
            bands: vec![0.0; (p + q + 1) * n],
        }
    }

    /// Identity matrix stored with zero bandwidths.
    pub fn identity(n: usize) -> Self {
        let mut m = BandedMatrix::zeros(n, 0, 0);
        for i in 0..n {
            m.bands[i] = 1.0;
        }
        m
    }

    /// Builds the in-band entries from an element function.
    pub fn from_fn(n: usize, p: usize, q: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = BandedMatrix::zeros(n, p, q);
        for i in 0..n {
            let lo = i.saturating_sub(p);
            let hi = (i + q).min(n - 1);
            for j in lo..=hi {
                let s = m.slot(i, j);
                m.bands[s] = f(i, j);
            }
        }
        m
    }

    /// Extracts a band matrix from a dense one, rejecting nonzeros outside the band.
    pub fn from_dense(a: &DMatrix<f64>, p: usize, q: usize) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: a.ncols(),
            });
        }
        let mut m = BandedMatrix::zeros(n, p, q);
        for i in 0..n {
            for j in 0..n {
                let v = a[(i, j)];
                if m.in_band(i, j) {
                    let s = m.slot(i, j);
                    m.bands[s] = v;
                } else if v != 0.0 {
                    return Err(Error::OutOfBand { row: i, col: j });
                }
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lower_bandwidth(&self) -> usize {
        self.p
    }

    pub fn upper_bandwidth(&self) -> usize {
        self.q
    }

    #[inline]
    fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.p >= i && i + self.q >= j
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(self.in_band(i, j));
        (j + self.p - i) * self.n + i
    }

    /// Entry `(i, j)`; zero outside the band.
    ///
    /// # Panics
    /// If an index is out of range.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.n && j < self.n, "index out of range");
        if self.in_band(i, j) {
            self.bands[self.slot(i, j)]
        } else {
            0.0
        }
    }

    /// Writes entry `(i, j)`; writes outside the band are rejected.
    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        if i >= self.n || j >= self.n || !self.in_band(i, j) {
            return Err(Error::OutOfBand { row: i, col: j });
        }
        let s = self.slot(i, j);
        self.bands[s] = v;
        Ok(())
    }

    /// In-band write without the band check; callers guarantee `(i, j)` is stored.
    #[inline]
    pub(crate) fn set_unchecked(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.bands[s] = v;
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "vector length mismatch");
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            y[i] = self.row_dot(i, x);
        }
        y
    }

    /// Dot product of row `i` with `x`, touching only in-band entries.
    #[inline]
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let lo = i.saturating_sub(self.p);
        let hi = (i + self.q).min(self.n - 1);
        let mut acc = 0.0;
        for j in lo..=hi {
            acc += self.bands[self.slot(i, j)] * x[j];
        }
        acc
    }

    /// `selfᵀ * x`.
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "vector length mismatch");
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.p);
            let hi = (i + self.q).min(self.n - 1);
            for j in lo..=hi {
                y[j] += self.bands[self.slot(i, j)] * x[i];
            }
        }
        y
    }

    fn check_symmetric(&self) -> Result<()> {
        let scale = self
            .bands
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1.0);
        for i in 0..self.n {
            let hi = (i + self.q).min(self.n - 1);
            for j in (i + 1)..=hi {
                if (self.get(i, j) - self.get(j, i)).abs() > SYMMETRY_RTOL * scale {
                    return Err(Error::NotSymmetric);
                }
            }
        }
        Ok(())
    }

    /// Lower-triangular banded Cholesky factor `R` with `R Rᵀ = self`.
    ///
    /// Requires a symmetric positive definite matrix with `p == q`;
    /// the factor keeps the lower bandwidth. Cost `O(n p²)`.
    pub fn cholesky(&self) -> Result<BandedMatrix> {
        if self.p != self.q {
            return Err(Error::BandwidthMismatch {
                lower: self.p,
                upper: self.q,
            });
        }
        self.check_symmetric()?;
        let n = self.n;
        let p = self.p;
        let mut r = BandedMatrix::zeros(n, p, 0);
        for j in 0..n {
            let lo = j.saturating_sub(p);
            let mut d = self.get(j, j);
            for k in lo..j {
                let v = r.bands[r.slot(j, k)];
                d -= v * v;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: j });
            }
            let d = d.sqrt();
            r.set_unchecked(j, j, d);
            let hi = (j + p).min(n - 1);
            for i in (j + 1)..=hi {
                let mut v = self.get(i, j);
                let lo_i = i.saturating_sub(p).max(lo);
                for k in lo_i..j {
                    v -= r.bands[r.slot(i, k)] * r.bands[r.slot(j, k)];
                }
                r.set_unchecked(i, j, v / d);
            }
        }
        Ok(r)
    }

    /// Pivot-free banded LU factorisation into a working copy.
    ///
    /// All matrices used in this crate are diagonally dominant or SPD, so
    /// skipping partial pivoting is safe; tiny pivots raise `Singular`.
    fn lu(&self) -> Result<BandedMatrix> {
        let n = self.n;
        let (p, q) = (self.p, self.q);
        let mut w = self.clone();
        for k in 0..n {
            let piv = w.bands[w.slot(k, k)];
            if piv.abs() < PIVOT_FLOOR || !piv.is_finite() {
                return Err(Error::Singular { index: k });
            }
            let i_hi = (k + p).min(n - 1);
            for i in (k + 1)..=i_hi {
                let m = w.bands[w.slot(i, k)] / piv;
                let s = w.slot(i, k);
                w.bands[s] = m;
                let j_hi = (k + q).min(n - 1);
                for j in (k + 1)..=j_hi {
                    let upd = m * w.bands[w.slot(k, j)];
                    if w.in_band(i, j) {
                        let s = w.slot(i, j);
                        w.bands[s] -= upd;
                    }
                }
            }
        }
        Ok(w)
    }

    /// Solves `self * x = b` through the banded LU factorisation.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                actual: b.len(),
            });
        }
        let lu = self.lu()?;
        let n = self.n;
        let mut x = b.to_vec();
        // unit lower solve
        for i in 0..n {
            let lo = i.saturating_sub(self.p);
            let mut acc = x[i];
            for k in lo..i {
                acc -= lu.bands[lu.slot(i, k)] * x[k];
            }
            x[i] = acc;
        }
        // upper solve
        for i in (0..n).rev() {
            let hi = (i + self.q).min(n - 1);
            let mut acc = x[i];
            for k in (i + 1)..=hi {
                acc -= lu.bands[lu.slot(i, k)] * x[k];
            }
            let piv = lu.bands[lu.slot(i, i)];
            if piv.abs() < PIVOT_FLOOR {
                return Err(Error::Singular { index: i });
            }
            x[i] = acc / piv;
        }
        Ok(x)
    }

    /// `log |det self|` from the banded LU pivots.
    pub fn logdet(&self) -> Result<f64> {
        let lu = self.lu()?;
        let mut acc = 0.0;
        for i in 0..self.n {
            acc += lu.bands[lu.slot(i, i)].abs().ln();
        }
        Ok(acc)
    }

    /// `log det self` for an SPD matrix via the Cholesky diagonal.
    pub fn logdet_spd(&self) -> Result<f64> {
        Ok(2.0 * self.cholesky()?.triangular_logdet())
    }

    /// Sum of `ln` of the diagonal; meaningful for triangular factors.
    pub fn triangular_logdet(&self) -> f64 {
        (0..self.n).map(|i| self.bands[self.slot(i, i)].ln()).sum()
    }

    /// Forward substitution `self * x = b` for a lower-triangular matrix (`q == 0`).
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.q, 0, "solve_lower wants a lower-triangular matrix");
        assert_eq!(b.len(), self.n);
        let mut x = b.to_vec();
        for i in 0..self.n {
            let lo = i.saturating_sub(self.p);
            let mut acc = x[i];
            for k in lo..i {
                acc -= self.bands[self.slot(i, k)] * x[k];
            }
            x[i] = acc / self.bands[self.slot(i, i)];
        }
        x
    }

    /// Back substitution `selfᵀ * x = b` for a lower-triangular matrix (`q == 0`).
    pub fn solve_lower_transpose(&self, b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.q, 0);
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let hi = (i + self.p).min(n - 1);
            let mut acc = x[i];
            for k in (i + 1)..=hi {
                // selfᵀ[i, k] = self[k, i]
                acc -= self.bands[self.slot(k, i)] * x[k];
            }
            x[i] = acc / self.bands[self.slot(i, i)];
        }
        x
    }

    /// `selfᵀ * self`, widening the bandwidth to `p + q` on both sides.
    pub fn normal_form(&self) -> BandedMatrix {
        let n = self.n;
        let w = self.p + self.q;
        let mut out = BandedMatrix::zeros(n, w.min(n - 1), w.min(n - 1));
        for i in 0..n {
            let j_hi = (i + w).min(n - 1);
            for j in i..=j_hi {
                // rows k that hit both columns i and j
                let k_lo = i.saturating_sub(self.q).max(j.saturating_sub(self.q));
                let k_hi = (i + self.p).min(j + self.p).min(n - 1);
                let mut acc = 0.0;
                for k in k_lo..=k_hi {
                    if self.in_band(k, i) && self.in_band(k, j) {
                        acc += self.bands[self.slot(k, i)] * self.bands[self.slot(k, j)];
                    }
                }
                if out.in_band(i, j) {
                    out.set_unchecked(i, j, acc);
                    if i != j {
                        out.set_unchecked(j, i, acc);
                    }
                }
            }
        }
        out
    }

    /// Adds `alpha` to the diagonal entry `(i, i)`.
    pub(crate) fn add_diag(&mut self, i: usize, alpha: f64) {
        let s = self.slot(i, i);
        self.bands[s] += alpha;
    }

    /// Allocation-free `log |det|` for a tridiagonal matrix, running the LU
    /// pivot recurrence `p_j = d_j − l_j u_{j−1} / p_{j−1}` in place.
    pub fn tridiagonal_logdet(&self) -> Result<f64> {
        assert!(self.p <= 1 && self.q <= 1, "matrix is not tridiagonal");
        let mut prev = self.bands[self.slot(0, 0)];
        if prev.abs() < PIVOT_FLOOR {
            return Err(Error::Singular { index: 0 });
        }
        let mut acc = prev.abs().ln();
        for j in 1..self.n {
            let mut piv = self.bands[self.slot(j, j)];
            if self.p == 1 && self.q == 1 {
                piv -= self.bands[self.slot(j, j - 1)] * self.bands[self.slot(j - 1, j)] / prev;
            }
            if piv.abs() < PIVOT_FLOOR || !piv.is_finite() {
                return Err(Error::Singular { index: j });
            }
            acc += piv.abs().ln();
            prev = piv;
        }
        Ok(acc)
    }
}

/// Draw from `N(P⁻¹ b, P⁻¹)` given the SPD precision `P`, the linear term `b`
/// and a standard-normal vector `noise`.
///
/// With `P = R Rᵀ` the draw is `R⁻ᵀ (R⁻¹ b + noise)`: the mean solves
/// `P μ = b` and passing a zero `noise` returns exactly `μ`.
pub fn sample_from_precision(p: &BandedMatrix, b: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    let n = p.dim();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: b.len(),
        });
    }
    if noise.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: noise.len(),
        });
    }
    let r = p.cholesky()?;
    let mut v = r.solve_lower(b);
    for (vi, ni) in v.iter_mut().zip(noise) {
        *vi += ni;
    }
    Ok(r.solve_lower_transpose(&v))
}
