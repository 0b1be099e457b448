//! Sparse storage, the linear-operator abstraction shared by the solvers,
//! and a handful of vector kernels.

use std::io::Write;

use faer::Mat;

use crate::error::{check_dim, Error, Result};

/// Anything that maps an n-vector to an n-vector linearly.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    /// `y = Op x`; `y` is overwritten.
    fn apply(&self, x: &[f64], y: &mut [f64]);

    fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.apply(x, &mut y);
        y
    }

    /// `y = Op^T x`. The default assumes a symmetric operator.
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        self.apply(x, y);
    }
}

/// Identity operator, the default "no preconditioner".
#[derive(Debug, Clone, Copy)]
pub struct Identity(pub usize);

impl LinearOperator for Identity {
    fn dim(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from (row, col, value) triplets. Duplicates are summed
    /// in input order, so the result is deterministic.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut raw_cols = vec![0usize; triplets.len()];
        let mut raw_vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let k = fill[r];
            raw_cols[k] = c;
            raw_vals[k] = v;
            fill[r] += 1;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        for r in 0..nrows {
            let (lo, hi) = (counts[r], counts[r + 1]);
            let mut row: Vec<(usize, f64)> = (lo..hi).map(|k| (raw_cols[k], raw_vals[k])).collect();
            // stable sort keeps summation order equal to input order
            row.sort_by_key(|&(c, _)| c);
            let mut iter = row.into_iter().peekable();
            while let Some((c, mut v)) = iter.next() {
                while let Some(&(c2, v2)) = iter.peek() {
                    if c2 != c {
                        break;
                    }
                    v += v2;
                    iter.next();
                }
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self { nrows, ncols, indptr, indices, values }
    }

    pub fn from_dense(m: &Mat<f64>, drop_tol: f64) -> Self {
        let mut t = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v.abs() > drop_tol {
                    t.push((i, j, v));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &t)
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

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x` for rectangular matrices.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `y = Aᵀ x`.
    pub fn mul_vec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                y[c] += v * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut t = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                t.push((c, i, v));
            }
        }
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &CsrMatrix) -> Result<Self> {
        check_dim(self.ncols, other.nrows)?;
        let mut t = Vec::new();
        let mut acc = vec![0.0; other.ncols];
        let mut marker = vec![usize::MAX; other.ncols];
        let mut touched = Vec::new();
        for i in 0..self.nrows {
            touched.clear();
            let (cols, vals) = self.row(i);
            for (&k, &a) in cols.iter().zip(vals) {
                let (ocols, ovals) = other.row(k);
                for (&j, &b) in ocols.iter().zip(ovals) {
                    if marker[j] != i {
                        marker[j] = i;
                        acc[j] = 0.0;
                        touched.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                t.push((i, j, acc[j]));
            }
        }
        Ok(Self::from_triplets(self.nrows, other.ncols, &t))
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                m[(i, c)] += v;
            }
        }
        m
    }

    /// Dense principal submatrix on the given (sorted or unsorted) index set.
    pub fn principal_submatrix(&self, idx: &[usize]) -> Mat<f64> {
        let mut pos = std::collections::HashMap::with_capacity(idx.len());
        for (local, &g) in idx.iter().enumerate() {
            pos.insert(g, local);
        }
        let mut m = Mat::zeros(idx.len(), idx.len());
        for (li, &gi) in idx.iter().enumerate() {
            let (cols, vals) = self.row(gi);
            for (&c, &v) in cols.iter().zip(vals) {
                if let Some(&lj) = pos.get(&c) {
                    m[(li, lj)] = v;
                }
            }
        }
        m
    }

    /// Largest |A_ij - A_ji|.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(c, i)).abs());
            }
        }
        worst
    }

    /// Coordinate text export: `row col value` per line, 17 significant digits.
    pub fn write_coordinate<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "% {} {} {}", self.nrows, self.ncols, self.nnz())?;
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                writeln!(w, "{} {} {:.16e}", i, c, v)?;
            }
        }
        Ok(())
    }

    pub fn read_coordinate(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty coordinate file".into()))?;
        let dims: Vec<usize> = header
            .trim_start_matches('%')
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad header `{header}`"))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::Parse(format!("bad header `{header}`")));
        }
        let mut t = Vec::with_capacity(dims[2]);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let mut next = || parts.next().ok_or_else(|| Error::Parse(format!("short line `{line}`")));
            let r: usize = next()?.parse().map_err(|_| Error::Parse(line.into()))?;
            let c: usize = next()?.parse().map_err(|_| Error::Parse(line.into()))?;
            let v: f64 = next()?.parse().map_err(|_| Error::Parse(line.into()))?;
            t.push((r, c, v));
        }
        Ok(Self::from_triplets(dims[0], dims[1], &t))
    }
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.mul_vec_into(x, y);
    }
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&self.mul_vec_transpose(x));
    }
}

impl LinearOperator for Mat<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        dense_mul_vec(self, x, y);
    }
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        for (j, yj) in y.iter_mut().enumerate() {
            let col = self.col(j);
            *yj = (0..x.len()).map(|i| col[i] * x[i]).sum();
        }
    }
}

/// `y = M x` for a dense column-major matrix.
pub fn dense_mul_vec(m: &Mat<f64>, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(m.ncols(), x.len());
    y.iter_mut().for_each(|v| *v = 0.0);
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = m.col(j);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += col[i] * xj;
        }
    }
}

/// Dense `A * B` where `A` is dense and `B` sparse.
pub fn dense_times_sparse(a: &Mat<f64>, b: &CsrMatrix) -> Mat<f64> {
    assert_eq!(a.ncols(), b.nrows());
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    for k in 0..b.nrows() {
        let (cols, vals) = b.row(k);
        for (&j, &v) in cols.iter().zip(vals) {
            for i in 0..a.nrows() {
                out[(i, j)] += a[(i, k)] * v;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `F - A U`, recomputed from scratch.
pub fn residual(a: &dyn LinearOperator, f: &[f64], u: &[f64]) -> Vec<f64> {
    let au = a.apply_vec(u);
    sub(f, &au)
}

/// Dense LU solve of a small system; used as the direct-solve reference.
pub fn dense_solve(a: &Mat<f64>, b: &[f64]) -> Result<Vec<f64>> {
    use faer::linalg::solvers::Solve;
    check_dim(a.nrows(), b.len())?;
    let lu = a.partial_piv_lu();
    let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
    lu.solve_in_place(rhs.as_mut());
    let x: Vec<f64> = (0..b.len()).map(|i| rhs[(i, 0)]).collect();
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Factorization("singular dense system".into()))
    }
}

/// Thomas algorithm for a tridiagonal CSR matrix (no pivoting; fine for the
/// diagonally dominant or SPD systems assembled here).
pub fn tridiagonal_solve(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.nrows();
    check_dim(n, b.len())?;
    let mut c_prime = vec![0.0; n];
    let mut d_prime = vec![0.0; n];
    for i in 0..n {
        let lower = if i > 0 { a.get(i, i - 1) } else { 0.0 };
        let diag = a.get(i, i);
        let upper = if i + 1 < n { a.get(i, i + 1) } else { 0.0 };
        let denom = diag - lower * if i > 0 { c_prime[i - 1] } else { 0.0 };
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Factorization(format!("zero pivot at row {i}")));
        }
        c_prime[i] = upper / denom;
        d_prime[i] = (b[i] - lower * if i > 0 { d_prime[i - 1] } else { 0.0 }) / denom;
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = d_prime[i] - if i + 1 < n { c_prime[i] * x[i + 1] } else { 0.0 };
    }
    Ok(x)
}

/// Sparse direct factorization: Cholesky when the matrix is SPD, LU with
/// partial pivoting otherwise.
pub enum SparseFactor {
    Llt(faer::sparse::linalg::solvers::Llt<usize, f64>),
    Lu(faer::sparse::linalg::solvers::Lu<usize, f64>),
}

impl std::fmt::Debug for SparseFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SparseFactor::Llt(_) => "SparseFactor::Llt",
            SparseFactor::Lu(_) => "SparseFactor::Lu",
        })
    }
}

impl SparseFactor {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        use faer::sparse::{SparseColMat, Triplet};
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch { expected: a.nrows(), got: a.ncols() });
        }
        let mut trip = Vec::with_capacity(a.nnz());
        for i in 0..a.nrows() {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                trip.push(Triplet::new(i, j, v));
            }
        }
        let m = SparseColMat::<usize, f64>::try_new_from_triplets(a.nrows(), a.ncols(), &trip)
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        if a.asymmetry() == 0.0 {
            if let Ok(llt) = m.sp_cholesky(faer::Side::Lower) {
                return Ok(SparseFactor::Llt(llt));
            }
        }
        m.sp_lu().map(SparseFactor::Lu).map_err(|e| Error::Factorization(format!("{e:?}")))
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        use faer::linalg::solvers::Solve;
        let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        match self {
            SparseFactor::Llt(f) => f.solve_in_place(rhs.as_mut()),
            SparseFactor::Lu(f) => f.solve_in_place(rhs.as_mut()),
        }
        let x: Vec<f64> = (0..b.len()).map(|i| rhs[(i, 0)]).collect();
        if x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(Error::Factorization("non-finite sparse solve".into()))
        }
    }
}

/// Sparse direct solve: Thomas for tridiagonal input, a sparse
/// factorization otherwise.
pub fn direct_solve(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    check_dim(a.nrows(), b.len())?;
    let tridiagonal = (0..a.nrows()).all(|i| a.row(i).0.iter().all(|&c| c + 1 >= i && c <= i + 1));
    if tridiagonal {
        tridiagonal_solve(a, b)
    } else {
        SparseFactor::new(a)?.solve(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, 2.0), (0, 0, 3.0), (0, 1, -1.0)]);
        assert_eq!(m.get(0, 0), 4.0);
        assert_eq!(m.get(0, 1), -1.0);
        assert_eq!(m.get(1, 0), 0.0);
        assert_eq!(m.nnz(), 3);
    }

    #[test]
    fn sparse_matmul_matches_dense() {
        let a = CsrMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0)]);
        let b = CsrMatrix::from_triplets(3, 2, &[(0, 1, 4.0), (1, 0, 5.0), (2, 0, 6.0)]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.get(0, 0), 12.0);
        assert_eq!(c.get(0, 1), 4.0);
        assert_eq!(c.get(1, 0), 15.0);
    }

    #[test]
    fn thomas_matches_dense_lu() {
        let mut t = Vec::new();
        for i in 0..7 {
            t.push((i, i, 2.5 + i as f64 * 0.1));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        let a = CsrMatrix::from_triplets(7, 7, &t);
        let b: Vec<f64> = (0..7).map(|i| (i as f64).sin()).collect();
        let x1 = tridiagonal_solve(&a, &b).unwrap();
        let x2 = dense_solve(&a.to_dense(), &b).unwrap();
        for (p, q) in x1.iter().zip(&x2) {
            assert!((p - q).abs() < 1e-13);
        }
    }

    #[test]
    fn coordinate_round_trip() {
        let a = CsrMatrix::from_triplets(3, 3, &[(0, 0, 1.0 / 3.0), (2, 1, -std::f64::consts::PI), (1, 2, 1e-300)]);
        let mut buf = Vec::new();
        a.write_coordinate(&mut buf).unwrap();
        let b = CsrMatrix::read_coordinate(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
