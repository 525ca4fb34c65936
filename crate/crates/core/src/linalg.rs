//! Vector kernels, a complex CSR matrix and the [`LinearOperator`] abstraction
//! shared by every solver in the crate.
//!
//! Fine-grid vectors are plain `Vec<C64>`; small projected matrices use
//! `nalgebra::DMatrix<C64>`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Largest dimension for which dense materialization is permitted.
pub const DENSE_LIMIT: usize = 8192;

/// A square linear map acting on complex vectors.
pub trait LinearOperator {
    fn dim(&self) -> usize;

    /// `y = A x`. Both slices have length `dim()`.
    fn apply(&self, x: &[C64], y: &mut [C64]);

    fn apply_vec(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![ZERO; self.dim()];
        self.apply(x, &mut y);
        y
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        (**self).apply(x, y)
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        (**self).apply(x, y)
    }
}

pub fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// `⟨x, y⟩ = Σ conj(x_i) y_i`
pub fn dot(x: &[C64], y: &[C64]) -> C64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).fold(ZERO, |acc, (a, b)| acc + a.conj() * b)
}

pub fn norm_sqr(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum()
}

pub fn norm(x: &[C64]) -> f64 {
    norm_sqr(x).sqrt()
}

/// `y += a x`
pub fn axpy(a: C64, x: &[C64], y: &mut [C64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scale(a: C64, x: &mut [C64]) {
    for v in x.iter_mut() {
        *v *= a;
    }
}

pub fn sub(x: &[C64], y: &[C64]) -> Vec<C64> {
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

/// Normalizes `x` in place and returns its former norm. Zero vectors are left
/// untouched.
pub fn normalize(x: &mut [C64]) -> f64 {
    let n = norm(x);
    if n > 0.0 {
        scale(C64::new(1.0 / n, 0.0), x);
    }
    n
}

/// Two passes of modified Gram-Schmidt of `v` against the orthonormal set
/// `basis`. Returns the norm of what remains.
pub fn orthogonalize(basis: &[Vec<C64>], v: &mut [C64]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let c = dot(b, v);
            axpy(-c, b, v);
        }
    }
    norm(v)
}

/// Unit-variance complex Gaussian vector, `E|x_i|^2 = 1`.
pub fn random_gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<C64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(re * s, im * s)
        })
        .collect()
}

/// Compressed sparse row matrix with complex entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<C64>,
}

impl SparseMatrix {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed and
    /// columns sorted within each row.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, C64)>,
    ) -> Result<Self> {
        for &(r, c, _) in &triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::InvalidArgument(format!(
                    "triplet ({r},{c}) outside {n_rows}x{n_cols}"
                )));
            }
        }
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates over `(col, value)` of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn mul_vec(&self, x: &[C64], y: &mut [C64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(y.len(), self.n_rows);
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = ZERO;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        }
    }

    /// `y = A† x`
    pub fn mul_adjoint_vec(&self, x: &[C64], y: &mut [C64]) {
        debug_assert_eq!(x.len(), self.n_rows);
        debug_assert_eq!(y.len(), self.n_cols);
        y.fill(ZERO);
        for (r, xr) in x.iter().enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k]] += self.values[k].conj() * xr;
            }
        }
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n_rows)
            .map(|r| self.row(r).map(|(_, v)| v.norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> Result<DMatrix<C64>> {
        let n = self.n_rows.max(self.n_cols);
        if n > DENSE_LIMIT {
            return Err(Error::SizeGuard {
                dim: n,
                limit: DENSE_LIMIT,
            });
        }
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        Ok(m)
    }
}

impl LinearOperator for SparseMatrix {
    fn dim(&self) -> usize {
        self.n_rows
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.mul_vec(x, y)
    }
}

/// A dense matrix used as an operator, mostly by the test oracles.
#[derive(Debug, Clone)]
pub struct DenseOperator(pub DMatrix<C64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        let r = &self.0 * DVector::from_column_slice(x);
        y.copy_from_slice(r.as_slice());
    }
}

/// Builds the dense matrix of `op` column by column from unit vectors.
pub fn materialize<A: LinearOperator + ?Sized>(op: &A) -> Result<DMatrix<C64>> {
    let n = op.dim();
    if n > DENSE_LIMIT {
        return Err(Error::SizeGuard {
            dim: n,
            limit: DENSE_LIMIT,
        });
    }
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![ZERO; n];
    let mut col = vec![ZERO; n];
    for j in 0..n {
        e[j] = ONE;
        op.apply(&e, &mut col);
        m.column_mut(j).copy_from_slice(&col);
        e[j] = ZERO;
    }
    Ok(m)
}

/// Packs a list of equal-length vectors as matrix columns.
pub fn columns_to_matrix(cols: &[Vec<C64>], n_rows: usize) -> DMatrix<C64> {
    let mut m = DMatrix::zeros(n_rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.column_mut(j).copy_from_slice(c);
    }
    m
}

pub fn matrix_columns(m: &DMatrix<C64>) -> Vec<Vec<C64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

/// `‖Q†Q − I‖_max` for a set of columns.
pub fn orthonormality_error(cols: &[Vec<C64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in cols.iter().enumerate() {
        for (j, b) in cols.iter().enumerate().skip(i) {
            let target = if i == j { ONE } else { ZERO };
            worst = worst.max((dot(a, b) - target).norm());
        }
    }
    worst
}

/// Largest entry magnitude of a dense matrix.
pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn csr_matches_dense() {
        let t = vec![
            (0, 0, C64::new(1.0, 0.0)),
            (0, 2, C64::new(0.0, 2.0)),
            (1, 1, C64::new(3.0, -1.0)),
            (2, 0, C64::new(-1.0, 0.5)),
            (2, 0, C64::new(1.0, 0.5)),
        ];
        let a = SparseMatrix::from_triplets(3, 3, t).unwrap();
        assert_eq!(a.nnz(), 4);
        let d = a.to_dense().unwrap();
        assert_eq!(d[(2, 0)], C64::new(0.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_gaussian(&mut rng, 3);
        let y = a.apply_vec(&x);
        let yd = &d * DVector::from_column_slice(&x);
        for i in 0..3 {
            assert!((y[i] - yd[i]).norm() < 1e-14);
        }
        let mut ya = vec![ZERO; 3];
        a.mul_adjoint_vec(&x, &mut ya);
        let yad = d.adjoint() * DVector::from_column_slice(&x);
        for i in 0..3 {
            assert!((ya[i] - yad[i]).norm() < 1e-14);
        }
    }

    #[test]
    fn out_of_range_triplet_is_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, vec![(2, 0, ONE)]).is_err());
    }

    #[test]
    fn gram_schmidt_produces_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut basis: Vec<Vec<C64>> = Vec::new();
        for _ in 0..6 {
            let mut v = random_gaussian(&mut rng, 20);
            orthogonalize(&basis, &mut v);
            normalize(&mut v);
            basis.push(v);
        }
        assert!(orthonormality_error(&basis) < 1e-14);
    }

    #[test]
    fn materialize_guard() {
        struct Huge;
        impl LinearOperator for Huge {
            fn dim(&self) -> usize {
                DENSE_LIMIT + 1
            }
            fn apply(&self, _: &[C64], _: &mut [C64]) {}
        }
        assert!(matches!(materialize(&Huge), Err(Error::SizeGuard { .. })));
    }
}
