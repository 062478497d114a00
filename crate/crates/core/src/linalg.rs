//! Sparse storage and SPD direct solves.
//!
//! Assembly produces [`CsrMatrix`] (used for products); factorizations are
//! delegated to faer's sparse Cholesky and wrapped in [`SpdSolver`], which adds
//! iterative refinement against the original matrix.

use faer::linalg::solvers::SolveCore;
use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat, Par, Side};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix of order {n} is not positive definite")]
    NotPositiveDefinite { n: usize },
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
}

/// Compressed sparse row matrix with sorted, duplicate-free columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        let mut next = counts.clone();
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..nrows {
            scratch.clear();
            scratch.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            // stable so that duplicate sums are independent of hashing or threading
            scratch.sort_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < scratch.len() {
                let c = scratch[k].0;
                let mut s = 0.0;
                while k < scratch.len() && scratch[k].0 == c {
                    s += scratch[k].1;
                    k += 1;
                }
                col_idx.push(c);
                values.push(s);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    /// `b - A x` in compensated arithmetic: each row is accumulated as an
    /// unevaluated sum of two doubles and rounded once at the end.
    pub fn residual_compensated(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(b.len(), self.nrows);
        (0..self.nrows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                let (mut sum, mut err) = (b[r], 0.0);
                for (&c, &v) in cols.iter().zip(vals) {
                    let p = -v * x[c];
                    let ep = (-v).mul_add(x[c], -p);
                    let t = sum + p;
                    let z = t - sum;
                    err += (sum - (t - z)) + (p - z) + ep;
                    sum = t;
                }
                sum + err
            })
            .collect()
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.nrows);
        (0..self.nrows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                let ay: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * y[c]).sum();
                x[r] * ay
            })
            .sum()
    }

    pub fn scaled(&self, factor: f64) -> CsrMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }

    /// Principal submatrix on `index` (positions in `index` become the new rows/columns).
    pub fn principal_submatrix(&self, index: &[usize]) -> CsrMatrix {
        let mut map = vec![usize::MAX; self.ncols];
        for (k, &g) in index.iter().enumerate() {
            map[g] = k;
        }
        self.submatrix_with_maps(index, &map, index.len())
    }

    /// Rows `rows`, columns `cols` (in the given orders).
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CsrMatrix {
        let mut map = vec![usize::MAX; self.ncols];
        for (k, &g) in cols.iter().enumerate() {
            map[g] = k;
        }
        self.submatrix_with_maps(rows, &map, cols.len())
    }

    fn submatrix_with_maps(&self, rows: &[usize], col_map: &[usize], ncols: usize) -> CsrMatrix {
        let mut trip = Vec::new();
        for (k, &r) in rows.iter().enumerate() {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                let m = col_map[c];
                if m != usize::MAX {
                    trip.push((k, m, v));
                }
            }
        }
        CsrMatrix::from_triplets(rows.len(), ncols, &trip)
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                m[(r, c)] = v;
            }
        }
        m
    }

    /// `A * X` for a dense `X`.
    pub fn mul_dense(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        assert_eq!(x.nrows(), self.ncols);
        let mut out = Mat::zeros(self.nrows, x.ncols());
        for j in 0..x.ncols() {
            let col = x.col(j);
            for r in 0..self.nrows {
                let (cols, vals) = self.row(r);
                let mut s = 0.0;
                for (&c, &v) in cols.iter().zip(vals) {
                    s += v * col[c];
                }
                out[(r, j)] = s;
            }
        }
        out
    }
}

/// Sparse Cholesky factorization of an SPD matrix, with refinement.
#[derive(Debug, Clone)]
pub struct SpdSolver {
    matrix: CsrMatrix,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

/// Refinement sweeps applied after each triangular solve pair.
const REFINEMENT_STEPS: usize = 2;

impl SpdSolver {
    pub fn new(matrix: CsrMatrix) -> Result<Self, LinalgError> {
        assert_eq!(matrix.nrows(), matrix.ncols());
        // Parallelism lives at the neighborhood level; the factorizations stay serial.
        faer::set_global_parallelism(Par::Seq);
        let n = matrix.nrows();
        let mut trip = Vec::with_capacity(matrix.nnz());
        for r in 0..n {
            let (cols, vals) = matrix.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                if c <= r {
                    trip.push(Triplet::new(r, c, v));
                }
            }
        }
        let lower = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| LinalgError::Factorization(format!("{e:?}")))?;
        let llt = lower.sp_cholesky(Side::Lower).map_err(|e| match e {
            faer::sparse::linalg::LltError::Numeric(_) => LinalgError::NotPositiveDefinite { n },
            other => LinalgError::Factorization(format!("{other:?}")),
        })?;
        Ok(SpdSolver { matrix, llt })
    }

    pub fn order(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    fn raw_solve_in_place(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        let mut col = Mat::<f64>::from_fn(n, 1, |i, _| rhs[i]);
        self.llt.solve_in_place_with_conj(Conj::No, col.as_mut());
        for (i, r) in rhs.iter_mut().enumerate() {
            *r = col[(i, 0)];
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.order());
        let mut x = rhs.to_vec();
        self.raw_solve_in_place(&mut x);
        for _ in 0..REFINEMENT_STEPS {
            // a working-precision residual is all cancellation once A x is
            // dominated by high-coefficient rows
            let mut r = self.matrix.residual_compensated(&x, rhs);
            self.raw_solve_in_place(&mut r);
            x.iter_mut().zip(&r).for_each(|(xi, di)| *xi += di);
        }
        x
    }

    /// Solves for every column of `rhs`.
    pub fn solve_columns(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        let n = self.order();
        assert_eq!(rhs.nrows(), n);
        let mut x = rhs.to_owned();
        self.llt.solve_in_place_with_conj(Conj::No, x.as_mut());
        for _ in 0..REFINEMENT_STEPS {
            let ax = self.matrix.mul_dense(x.as_ref());
            let mut r = &rhs - &ax;
            self.llt.solve_in_place_with_conj(Conj::No, r.as_mut());
            x += &r;
        }
        x
    }
}

/// Relative residual `||b - A x|| / ||b||` (or the absolute residual when `b = 0`).
pub fn relative_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let num: f64 = ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// `|b - A x| / (|b| + ||A| |x||)` in the 2-norm: the residual measured
/// against what rounding `x` alone can produce.
pub fn backward_error(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut scale = 0.0;
    for (r, &br) in b.iter().enumerate() {
        let (cols, vals) = a.row(r);
        let (mut ax, mut abs) = (0.0, 0.0);
        for (&c, &v) in cols.iter().zip(vals) {
            ax += v * x[c];
            abs += (v * x[c]).abs();
        }
        num += (br - ax) * (br - ax);
        scale += abs * abs;
    }
    let den = b.iter().map(|v| v * v).sum::<f64>().sqrt() + scale.sqrt();
    if den > 0.0 {
        num.sqrt() / den
    } else {
        0.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves a small dense SPD system; `None` if Cholesky fails.
pub fn dense_spd_solve(a: MatRef<'_, f64>, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Some(Vec::new());
    }
    let llt = a.llt(Side::Lower).ok()?;
    let mut x = Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
    llt.solve_in_place_with_conj(Conj::No, x.as_mut());
    Some((0..n).map(|i| x[(i, 0)]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, 4.0), (0, 1, 4.0)]);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.asymmetry(), 0.0);
    }

    #[test]
    fn cholesky_solves_tridiagonal() {
        let a = laplacian_1d(50);
        let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let s = SpdSolver::new(a.clone()).unwrap();
        let x = s.solve(&b);
        assert!(relative_residual(&a, &x, &b) < 1e-13);
        let rhs = Mat::from_fn(50, 3, |i, j| (i * (j + 1)) as f64);
        let xs = s.solve_columns(rhs.as_ref());
        let col1: Vec<f64> = (0..50).map(|i| rhs[(i, 1)]).collect();
        let x1: Vec<f64> = (0..50).map(|i| xs[(i, 1)]).collect();
        assert!(relative_residual(&a, &x1, &col1) < 1e-13);
    }

    #[test]
    fn backward_error_is_scale_aware() {
        // large cancelling entries and a small right-hand side
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1e6 + 1.0), (0, 1, -1e6), (1, 0, -1e6), (1, 1, 1e6 + 1.0)]);
        let b = vec![1.0, 1.0];
        let x = vec![1.0, 1.0 + 1e-15];
        // the plain residual is dominated by the perturbation of x ...
        assert!(relative_residual(&a, &x, &b) > 1e-10);
        // ... which is at rounding level for the entries involved
        assert!(backward_error(&a, &x, &b) < 1e-15);
        assert_eq!(backward_error(&a, &[0.0; 2], &[0.0; 2]), 0.0);
    }

    #[test]
    fn compensated_residual_survives_cancellation() {
        let a = CsrMatrix::from_triplets(1, 3, &[(0, 0, 1.0), (0, 1, 1e16), (0, 2, -1e16)]);
        let x = [1.0, 1.0, 1.0];
        assert_eq!(a.mul_vec(&x), vec![0.0]);
        assert_eq!(a.residual_compensated(&x, &[0.0]), vec![-1.0]);
        assert_eq!(a.residual_compensated(&[0.1, 3.0, 3.0], &[0.1]), vec![0.0]);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = laplacian_1d(4).scaled(-1.0);
        assert_eq!(SpdSolver::new(a).unwrap_err(), LinalgError::NotPositiveDefinite { n: 4 });
    }

    #[test]
    fn submatrices() {
        let a = laplacian_1d(5);
        let s = a.principal_submatrix(&[1, 2, 3]);
        assert_eq!(s.to_dense(), laplacian_1d(3).to_dense());
        let r = a.submatrix(&[0], &[1, 4]);
        assert_eq!(r.get(0, 0), -1.0);
        assert_eq!(r.get(0, 1), 0.0);
    }
}
