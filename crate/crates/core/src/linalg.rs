//! Banded LU factorization for the spline construction system.
//!
//! The construction matrix has lower and upper bandwidth 6 and is
//! well-conditioned for positive piece durations, so LU without pivoting
//! is enough. Callers fall back to a dense factorization when a pivot
//! degenerates.

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};

/// Pivot magnitude below which the banded factorization gives up.
pub const PIVOT_FLOOR: f64 = 1e-12;

/// Square banded matrix with in-place LU, multi-RHS solve and transpose solve.
///
/// Entry `(i, j)` is stored at band row `i - j + upper`, column `j`.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    lower: usize,
    upper: usize,
    data: Vec<f64>,
    factored: bool,
}

impl BandedLu {
    pub fn new(n: usize, lower: usize, upper: usize) -> Self {
        Self {
            n,
            lower,
            upper,
            data: vec![0.0; (lower + upper + 1) * n],
            factored: false,
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i + self.upper >= j && j + self.lower >= i);
        (i + self.upper - j) * self.n + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    /// Copy the band contents into a dense matrix (fallback path and tests).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.lower);
            let j1 = (i + self.upper).min(self.n - 1);
            for j in j0..=j1 {
                m[(i, j)] = self.get(i, j);
            }
        }
        m
    }

    /// In-place LU without pivoting. Fails if a pivot magnitude drops below
    /// [`PIVOT_FLOOR`].
    pub fn factorize(&mut self) -> Result<()> {
        let n = self.n;
        for k in 0..n.saturating_sub(1) {
            let piv = self.get(k, k);
            if piv.abs() < PIVOT_FLOOR {
                return Err(CoreError::NumericalFailure(format!(
                    "banded LU pivot {piv:.3e} below floor at row {k}"
                )));
            }
            let i_max = (k + self.lower).min(n - 1);
            for i in k + 1..=i_max {
                let v = self.get(i, k) / piv;
                self.set(i, k, v);
            }
            let j_max = (k + self.upper).min(n - 1);
            for j in k + 1..=j_max {
                let ckj = self.get(k, j);
                if ckj != 0.0 {
                    for i in k + 1..=i_max {
                        let lik = self.get(i, k);
                        if lik != 0.0 {
                            let v = self.get(i, j) - lik * ckj;
                            self.set(i, j, v);
                        }
                    }
                }
            }
        }
        let last = self.get(n - 1, n - 1);
        if last.abs() < PIVOT_FLOOR {
            return Err(CoreError::NumericalFailure(format!(
                "banded LU pivot {last:.3e} below floor at row {}",
                n - 1
            )));
        }
        self.factored = true;
        Ok(())
    }

    /// Solves `A x = b` in place for a multi-column RHS.
    pub fn solve_in_place(&self, b: &mut DMatrix<f64>) {
        assert!(self.factored, "factorize before solving");
        let n = self.n;
        let cols = b.ncols();
        // L y = b
        for j in 0..n {
            let i_max = (j + self.lower).min(n - 1);
            for i in j + 1..=i_max {
                let lij = self.get(i, j);
                if lij != 0.0 {
                    for c in 0..cols {
                        b[(i, c)] -= lij * b[(j, c)];
                    }
                }
            }
        }
        // U x = y
        for j in (0..n).rev() {
            let piv = self.get(j, j);
            for c in 0..cols {
                b[(j, c)] /= piv;
            }
            let i_min = j.saturating_sub(self.upper);
            for i in i_min..j {
                let uij = self.get(i, j);
                if uij != 0.0 {
                    for c in 0..cols {
                        b[(i, c)] -= uij * b[(j, c)];
                    }
                }
            }
        }
    }

    /// Solves `A^T x = b` in place (adjoint propagation).
    pub fn solve_transpose_in_place(&self, b: &mut DMatrix<f64>) {
        assert!(self.factored, "factorize before solving");
        let n = self.n;
        let cols = b.ncols();
        // U^T y = b
        for j in 0..n {
            let piv = self.get(j, j);
            for c in 0..cols {
                b[(j, c)] /= piv;
            }
            let i_max = (j + self.upper).min(n - 1);
            for i in j + 1..=i_max {
                let uji = self.get(j, i);
                if uji != 0.0 {
                    for c in 0..cols {
                        b[(i, c)] -= uji * b[(j, c)];
                    }
                }
            }
        }
        // L^T x = y
        for j in (0..n).rev() {
            let i_min = j.saturating_sub(self.lower);
            for i in i_min..j {
                let lji = self.get(j, i);
                if lji != 0.0 {
                    for c in 0..cols {
                        b[(i, c)] -= lji * b[(j, c)];
                    }
                }
            }
        }
    }
}
