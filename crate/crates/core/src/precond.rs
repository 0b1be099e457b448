//! Dense kernel preconditioner and two-level overlapping additive Schwarz
//! with a kernel-based coarse solve.

use std::io::Write;

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::Mat;

use crate::error::{check_dim, Error, Result};
use crate::kernel::{kernel_matrix, DiagonalPolicy, Kernel};
use crate::linalg::{dense_mul_vec, CsrMatrix, LinearOperator};

/// `B̌ = w [G(x_i, x_j)]` on the interior nodes.
#[derive(Debug, Clone)]
pub struct DensePreconditioner {
    pub matrix: Mat<f64>,
    /// Human-readable kernel description (for run metadata).
    pub source: String,
    pub policy: DiagonalPolicy,
    pub weight: f64,
    /// Diagonal entries that fell back to a shrunken averaging radius.
    pub clipped: usize,
}

/// Evaluates the kernel on every node pair. `weight` maps kernel values to
/// the scale of `A⁻¹` (see `DiscreteSystem::green_weight`).
pub fn build_dense<K: Kernel + ?Sized>(
    kernel: &K,
    nodes: &[f64],
    policy: &DiagonalPolicy,
    weight: f64,
    source: impl Into<String>,
) -> Result<DensePreconditioner> {
    let (mut matrix, clipped) = kernel_matrix(kernel, nodes, policy)?;
    if weight != 1.0 {
        matrix.col_iter_mut().for_each(|c| c.iter_mut().for_each(|v| *v *= weight));
    }
    Ok(DensePreconditioner { matrix, source: source.into(), policy: *policy, weight, clipped })
}

impl DensePreconditioner {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries as `i j value` lines (1-based).
    pub fn write_coordinate<W: Write>(&self, w: W) -> Result<()> {
        CsrMatrix::from_dense(&self.matrix, -1.0).write_coordinate(w)
    }
}

impl LinearOperator for DensePreconditioner {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        dense_mul_vec(&self.matrix, x, y);
    }
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.apply_transpose(x, y);
    }
}

/// Overlapping decomposition of the interior nodes `x_i = i h`, `i = 1..=n`,
/// of the unit interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Subdomains {
    /// Sorted 0-based interior indices per subdomain.
    pub sets: Vec<Vec<usize>>,
    pub fine_h: f64,
    pub coarse_h: f64,
    /// Overlap in fine cells.
    pub overlap: usize,
}

impl Subdomains {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Number of subdomains containing each fine index.
    pub fn multiplicity(&self, n: usize) -> Vec<usize> {
        let mut m = vec![0; n];
        for s in &self.sets {
            for &i in s {
                m[i] += 1;
            }
        }
        m
    }
}

fn ratio(coarse: f64, fine: f64) -> Result<usize> {
    let r = (coarse / fine).round();
    if r < 1.0 || (r * fine - coarse).abs() > 1e-9 * coarse {
        return Err(Error::InvalidConfig(format!("coarse size {coarse} is not a multiple of {fine}")));
    }
    let cells = (1.0 / coarse).round();
    if (cells * coarse - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("1/H must be an integer, got H = {coarse}")));
    }
    Ok(r as usize)
}

/// One subdomain per coarse cell `(jH, (j+1)H]`, widened by `overlap` fine
/// cells on both sides.
pub fn build_subdomains(fine_h: f64, coarse_h: f64, overlap: usize) -> Result<Subdomains> {
    let m = ratio(coarse_h, fine_h)?;
    let cells = (1.0 / coarse_h).round() as usize;
    let n = cells * m - 1;
    let sets = (0..cells)
        .map(|j| {
            // grid indices g in (j m - δ, (j+1) m + δ], interior g in 1..=n
            let lo = (j * m + 1).saturating_sub(overlap).max(1);
            let hi = ((j + 1) * m + overlap).min(n);
            (lo..=hi).map(|g| g - 1).collect()
        })
        .collect();
    Ok(Subdomains { sets, fine_h, coarse_h, overlap })
}

/// Linear interpolation from the interior coarse nodes `jH` to the interior
/// fine nodes `i h`, as an `n_fine × n_coarse` sparse matrix.
pub fn linear_interpolation(fine_h: f64, coarse_h: f64) -> Result<CsrMatrix> {
    let m = ratio(coarse_h, fine_h)?;
    let cells = (1.0 / coarse_h).round() as usize;
    let n = cells * m - 1;
    let nc = cells - 1;
    let mut t = Vec::with_capacity(2 * n);
    for g in 1..=n {
        let j = g / m;
        let s = (g % m) as f64 / m as f64;
        // coarse grid node j has interior index j - 1
        if j >= 1 && j <= nc {
            t.push((g - 1, j - 1, 1.0 - s));
        }
        if s > 0.0 && j + 1 <= nc {
            t.push((g - 1, j, s));
        }
    }
    Ok(CsrMatrix::from_triplets(n, nc, &t))
}

/// `Σ_ℓ R_ℓᵀ A_ℓ⁻¹ R_ℓ + R_0ᵀ B̌_0 R_0`.
pub struct SchwarzPreconditioner {
    pub subdomains: Subdomains,
    local: Vec<PartialPivLu<f64>>,
    /// `R_0ᵀ`, fine × coarse.
    pub prolongation: CsrMatrix,
    pub coarse: Option<Mat<f64>>,
    n: usize,
}

impl std::fmt::Debug for SchwarzPreconditioner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SchwarzPreconditioner")
            .field("n", &self.n)
            .field("subdomains", &self.subdomains.len())
            .field("coarse", &self.coarse.as_ref().map(|m| m.nrows()))
            .finish()
    }
}

/// Factors every local block and evaluates the coarse kernel matrix on the
/// coarse nodes with `r_avg = H/2`. `coarse_kernel = None` gives the
/// one-level method.
pub fn build_schwarz<K: Kernel + ?Sized>(
    a: &CsrMatrix,
    subdomains: Subdomains,
    coarse_kernel: Option<&K>,
    weight: f64,
) -> Result<SchwarzPreconditioner> {
    let n = a.nrows();
    let prolongation = linear_interpolation(subdomains.fine_h, subdomains.coarse_h)?;
    check_dim(n, prolongation.nrows())?;
    if let Some(i) = subdomains.multiplicity(n).iter().position(|m| *m == 0) {
        return Err(Error::InvalidConfig(format!("fine index {i} not covered by any subdomain")));
    }
    let mut local = Vec::with_capacity(subdomains.len());
    for (l, set) in subdomains.sets.iter().enumerate() {
        let block = a.principal_submatrix(set);
        let lu = block.partial_piv_lu();
        let probe = lu.solve(Mat::<f64>::from_fn(set.len(), 1, |_, _| 1.0));
        if !probe.col(0).iter().all(|v| v.is_finite()) {
            return Err(Error::Factorization(format!("local block {l} is singular")));
        }
        local.push(lu);
    }
    let coarse = match coarse_kernel {
        Some(k) => {
            let h = subdomains.coarse_h;
            let nc = prolongation.ncols();
            let nodes: Vec<f64> = (1..=nc).map(|j| j as f64 * h).collect();
            let policy = DiagonalPolicy::for_nodal_inverse(h);
            Some(build_dense(k, &nodes, &policy, weight, "coarse")?.matrix)
        }
        None => None,
    };
    Ok(SchwarzPreconditioner { subdomains, local, prolongation, coarse, n })
}

impl SchwarzPreconditioner {
    /// Assembles the operator explicitly (small cases only).
    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::<f64>::zeros(self.n, self.n);
        let mut e = vec![0.0; self.n];
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            e[j] = 1.0;
            self.apply(&e, &mut y);
            e[j] = 0.0;
            for i in 0..self.n {
                m[(i, j)] = y[i];
            }
        }
        m
    }
}

impl LinearOperator for SchwarzPreconditioner {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.iter_mut().for_each(|v| *v = 0.0);
        for (set, lu) in self.subdomains.sets.iter().zip(&self.local) {
            let rhs = Mat::from_fn(set.len(), 1, |i, _| r[set[i]]);
            let sol = lu.solve(rhs);
            for (i, &g) in set.iter().enumerate() {
                z[g] += sol[(i, 0)];
            }
        }
        if let Some(b0) = &self.coarse {
            let rc = self.prolongation.mul_vec_transpose(r);
            let mut zc = vec![0.0; rc.len()];
            dense_mul_vec(b0, &rc, &mut zc);
            let zf = self.prolongation.mul_vec(&zc);
            z.iter_mut().zip(zf).for_each(|(a, b)| *a += b);
        }
    }
}
