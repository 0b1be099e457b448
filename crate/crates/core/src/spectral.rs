//! Galerkin eigenanalysis of kernels on finite element spaces, Mercer
//! truncation residuals and per-mode error profiles.

use std::f64::consts::PI;
use std::io::Write;

use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{Accum, Mat, Par};

use crate::error::{check_dim, non_finite, Error, Result};
use crate::iterative::{cholesky_lower, eig_generalized, eig_symmetric};
use crate::kernel::{close, diagonal_value, gauss_legendre, DiagonalPolicy, Kernel};
use crate::problems::{DiscMesh, TRI_QUAD3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    Linear,
    Quadratic,
}

/// Conforming Lagrange space with homogeneous Dirichlet conditions, stored
/// through its values at a global quadrature rule.
#[derive(Debug, Clone)]
pub struct FeSpace {
    pub d: usize,
    pub kind: ElementKind,
    pub h: f64,
    pub ndof: usize,
    /// Quadrature points, `d`-strided.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    /// Per quadrature point: `(dof, ψ_dof(x_q))` for the nonzero basis values.
    basis: Vec<Vec<(usize, f64)>>,
}

impl FeSpace {
    /// Uniform mesh of (0, 1) with 4-point Gauss quadrature per element.
    pub fn interval(h: f64, kind: ElementKind) -> Result<Self> {
        let cells = (1.0 / h).round() as usize;
        if cells < 2 || ((cells as f64) * h - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("1/h must be an integer ≥ 2, got h = {h}")));
        }
        let rule = gauss_legendre(4)?;
        let per = match kind {
            ElementKind::Linear => 1,
            ElementKind::Quadratic => 2,
        };
        // dof k sits at x = (k + 1) h / per
        let ndof = per * cells - 1;
        let mut points = Vec::with_capacity(cells * 4);
        let mut weights = Vec::with_capacity(cells * 4);
        let mut basis = Vec::with_capacity(cells * 4);
        for e in 0..cells {
            let a = e as f64 * h;
            for &(t, w) in rule {
                let s = 0.5 * (t + 1.0);
                points.push(a + s * h);
                weights.push(0.5 * h * w);
                // local nodes at s = 0, (1/2), 1 with global grid index e*per + local
                let local: Vec<f64> = match kind {
                    ElementKind::Linear => vec![1.0 - s, s],
                    ElementKind::Quadratic => vec![2.0 * (s - 0.5) * (s - 1.0), -4.0 * s * (s - 1.0), 2.0 * s * (s - 0.5)],
                };
                let row = local
                    .iter()
                    .enumerate()
                    .filter_map(|(l, &v)| {
                        let g = e * per + l;
                        (g >= 1 && g <= ndof).then(|| (g - 1, v))
                    })
                    .collect();
                basis.push(row);
            }
        }
        Ok(Self { d: 1, kind, h, ndof, points, weights, basis })
    }

    /// Linear elements on a disc triangulation with the 3-point rule.
    pub fn disc_linear(mesh: &DiscMesh) -> Self {
        let (map, ndof) = mesh.interior_index();
        let nt = mesh.triangles.len();
        let mut points = Vec::with_capacity(6 * nt);
        let mut weights = Vec::with_capacity(3 * nt);
        let mut basis = Vec::with_capacity(3 * nt);
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let area = mesh.area(t);
            for bc in &TRI_QUAD3 {
                for c in 0..2 {
                    points.push((0..3).map(|a| bc[a] * mesh.vertices[tri[a]][c]).sum());
                }
                weights.push(area / 3.0);
                basis.push((0..3).filter_map(|a| map[tri[a]].map(|i| (i, bc[a]))).collect());
            }
        }
        Self { d: 2, kind: ElementKind::Linear, h: mesh.h_target, ndof, points, weights, basis }
    }

    pub fn num_quadrature(&self) -> usize {
        self.weights.len()
    }

    pub fn point(&self, q: usize) -> &[f64] {
        &self.points[q * self.d..(q + 1) * self.d]
    }

    /// `Σ_a c_a ψ_a` at every quadrature point.
    pub fn eval_at_quadrature(&self, c: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|row| row.iter().map(|&(a, v)| c[a] * v).sum()).collect()
    }

    /// `M_ab = ∫ ψ_a ψ_b`.
    pub fn mass_matrix(&self) -> Mat<f64> {
        let mut m = Mat::<f64>::zeros(self.ndof, self.ndof);
        for (row, &w) in self.basis.iter().zip(&self.weights) {
            for &(a, va) in row {
                for &(b, vb) in row {
                    m[(a, b)] += w * va * vb;
                }
            }
        }
        m
    }

    /// `(f, ψ_a)` for every dof.
    pub fn load_vector(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.ndof];
        for q in 0..self.num_quadrature() {
            let fw = f(self.point(q)) * self.weights[q];
            for &(a, v) in &self.basis[q] {
                out[a] += fw * v;
            }
        }
        out
    }
}

/// Galerkin kernel matrix, mass matrix and `‖G‖²_{L²(Ω×Ω)}` by quadrature.
#[derive(Debug, Clone)]
pub struct KernelMatrices {
    pub k: Mat<f64>,
    pub m: Mat<f64>,
    pub kernel_norm_sq: f64,
}

const BLOCK: usize = 512;

/// `K_ab = ∫∫ G(x, y) ψ_b(y) ψ_a(x)` with the tensor quadrature of the
/// space; coincident quadrature points use the diagonal policy.
pub fn assemble_kernel_matrices<K: Kernel + ?Sized>(kernel: &K, space: &FeSpace, policy: &DiagonalPolicy) -> Result<KernelMatrices> {
    check_dim(space.d, kernel.dim())?;
    let nq = space.num_quadrature();
    let d = space.d;
    let n = space.ndof;
    let mut k = Mat::<f64>::zeros(n, n);
    let mut norm_sq = 0.0;
    let diag: Vec<f64> = (0..nq).map(|q| diagonal_value(kernel, space.point(q), policy).map(|v| v.value)).collect::<Result<_>>()?;
    let mut xs = Vec::with_capacity(BLOCK * BLOCK * d);
    let mut ys = Vec::with_capacity(BLOCK * BLOCK * d);
    let mut g = vec![0.0; BLOCK * BLOCK];
    for i0 in (0..nq).step_by(BLOCK) {
        let i1 = (i0 + BLOCK).min(nq);
        for j0 in (i0..nq).step_by(BLOCK) {
            let j1 = (j0 + BLOCK).min(nq);
            let (bi, bj) = (i1 - i0, j1 - j0);
            xs.clear();
            ys.clear();
            let mut special = Vec::new();
            for i in i0..i1 {
                for j in j0..j1 {
                    let (pi, pj) = (space.point(i), space.point(j));
                    if close(pi, pj, policy.r_excl) {
                        special.push(((i - i0) * bj + (j - j0), i));
                        // placeholder pair, overwritten below
                        xs.extend_from_slice(pi);
                        ys.extend_from_slice(space.point(if i == 0 { nq - 1 } else { 0 }));
                    } else {
                        xs.extend_from_slice(pi);
                        ys.extend_from_slice(pj);
                    }
                }
            }
            let vals = kernel.eval_batch(&xs, &ys);
            g[..bi * bj].copy_from_slice(&vals);
            for (idx, i) in special {
                g[idx] = diag[i];
            }
            if let Some(pos) = g[..bi * bj].iter().position(|v| !v.is_finite()) {
                return Err(non_finite(format!("kernel at quadrature pair ({}, {})", i0 + pos / bj, j0 + pos % bj)));
            }
            let mirror = if j0 == i0 { 1.0 } else { 2.0 };
            // K += B_Iᵀ G_IJ B_J (+ transpose for off-diagonal blocks)
            for i in i0..i1 {
                let wi = space.weights[i];
                let row_i = &space.basis[i];
                let gi = &g[(i - i0) * bj..(i - i0 + 1) * bj];
                // t_b = Σ_j G_ij w_j ψ_b(y_j)
                let mut t: Vec<(usize, f64)> = Vec::new();
                for (jj, &gij) in gi.iter().enumerate() {
                    let j = j0 + jj;
                    let gw = gij * space.weights[j];
                    norm_sq += mirror * wi * gij * gij * space.weights[j];
                    for &(b, vb) in &space.basis[j] {
                        t.push((b, gw * vb));
                    }
                }
                for &(a, va) in row_i {
                    let s = wi * va;
                    for &(b, tb) in &t {
                        k[(a, b)] += s * tb;
                        if j0 != i0 {
                            k[(b, a)] += s * tb;
                        }
                    }
                }
            }
        }
    }
    // exact symmetry for symmetric kernels
    for a in 0..n {
        for b in 0..a {
            let v = 0.5 * (k[(a, b)] + k[(b, a)]);
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    Ok(KernelMatrices { k, m: space.mass_matrix(), kernel_norm_sq: norm_sq })
}

/// Leading eigenpairs of `K c = μ M c`.
#[derive(Debug, Clone)]
pub struct KernelEigReport {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// M-orthonormal coefficient vectors, one column per eigenvalue.
    pub vectors: Mat<f64>,
    /// Negative eigenvalues over the whole spectrum.
    pub negative_count: usize,
}

pub fn solve_kernel_eigs(mats: &KernelMatrices, count: usize) -> Result<KernelEigReport> {
    let n = mats.k.nrows();
    if count == 0 || count > n {
        return Err(Error::InvalidConfig(format!("requested {count} eigenpairs of a {n}-dimensional space")));
    }
    let rep = eig_generalized(&mats.k, &mats.m, true)?;
    let v = rep.eigenvectors.expect("requested");
    let negative_count = rep.eigenvalues.iter().filter(|m| **m < 0.0).count();
    let order: Vec<usize> = (0..n).rev().take(count).collect();
    let eigenvalues = order.iter().map(|&j| rep.eigenvalues[j]).collect();
    let vectors = Mat::from_fn(n, count, |i, c| v[(i, order[c])]);
    Ok(KernelEigReport { eigenvalues, vectors, negative_count })
}

/// Reference spectrum: eigenvalues, optionally eigenfunctions sampled at
/// the quadrature points of a space (column per mode).
#[derive(Debug, Clone)]
pub struct ReferenceSpectrum {
    pub mu: Vec<f64>,
    pub phi: Option<Mat<f64>>,
}

impl ReferenceSpectrum {
    /// `μ_j = 1/(jπ)²`, `φ_j = √2 sin(jπx)`.
    pub fn poisson1d(space: &FeSpace, count: usize) -> Self {
        let mu = (1..=count).map(|j| 1.0 / (j as f64 * PI).powi(2)).collect();
        let nq = space.num_quadrature();
        let phi = Mat::from_fn(nq, count, |q, j| 2f64.sqrt() * ((j + 1) as f64 * PI * space.points[q]).sin());
        Self { mu, phi: Some(phi) }
    }

    /// `1/j²_{m,k}` for the Dirichlet disc, with multiplicity.
    pub fn disc(count: usize) -> Self {
        Self { mu: disc_eigenvalues(count), phi: None }
    }

    /// Another Galerkin report on the same space.
    pub fn from_report(space: &FeSpace, report: &KernelEigReport) -> Self {
        let nq = space.num_quadrature();
        let count = report.eigenvalues.len();
        let mut phi = Mat::<f64>::zeros(nq, count);
        for j in 0..count {
            let c: Vec<f64> = report.vectors.col(j).iter().copied().collect();
            for (q, v) in space.eval_at_quadrature(&c).into_iter().enumerate() {
                phi[(q, j)] = v;
            }
        }
        Self { mu: report.eigenvalues.clone(), phi: Some(phi) }
    }
}

/// Per-mode relative errors.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasProfile {
    pub mu_exact: Vec<f64>,
    pub mu_approx: Vec<f64>,
    pub delta_mu: Vec<f64>,
    pub delta_phi: Option<Vec<f64>>,
}

/// `δ_μ,j = |μ̌_j - μ_j| / |μ_j|` and, with reference eigenfunctions,
/// `δ_φ,j = min_± ‖φ̌_j ∓ φ_j‖ / ‖φ_j‖`.
pub fn spectral_bias_profile(space: &FeSpace, approx: &KernelEigReport, exact: &ReferenceSpectrum) -> Result<BiasProfile> {
    let count = approx.eigenvalues.len().min(exact.mu.len());
    let delta_mu = (0..count).map(|j| (approx.eigenvalues[j] - exact.mu[j]).abs() / exact.mu[j].abs()).collect();
    let delta_phi = match &exact.phi {
        Some(phi) => {
            check_dim(space.num_quadrature(), phi.nrows())?;
            let count = count.min(phi.ncols());
            let mut out = Vec::with_capacity(count);
            for j in 0..count {
                let c: Vec<f64> = approx.vectors.col(j).iter().copied().collect();
                let vals = space.eval_at_quadrature(&c);
                let (mut plus, mut minus, mut norm) = (0.0, 0.0, 0.0);
                for (q, &w) in space.weights.iter().enumerate() {
                    let e = phi[(q, j)];
                    plus += w * (vals[q] - e).powi(2);
                    minus += w * (vals[q] + e).powi(2);
                    norm += w * e * e;
                }
                out.push((plus.min(minus) / norm).sqrt());
            }
            Some(out)
        }
        None => None,
    };
    Ok(BiasProfile { mu_exact: exact.mu[..count].to_vec(), mu_approx: approx.eigenvalues[..count].to_vec(), delta_mu, delta_phi })
}

impl BiasProfile {
    /// Median of `δ_μ` over 1-based modes `lo..=hi` (clamped to what exists).
    pub fn median_delta_mu(&self, lo: usize, hi: usize) -> Option<f64> {
        let hi = hi.min(self.delta_mu.len());
        if lo == 0 || lo > hi {
            return None;
        }
        let mut v = self.delta_mu[lo - 1..hi].to_vec();
        v.sort_by(f64::total_cmp);
        let m = v.len();
        Some(if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) })
    }

    /// CSV with columns `j, mu_exact, mu_approx, delta_mu[, delta_phi]`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["j", "mu_exact", "mu_approx", "delta_mu"];
        if self.delta_phi.is_some() {
            header.push("delta_phi");
        }
        wr.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
        for j in 0..self.delta_mu.len() {
            let mut row = vec![
                (j + 1).to_string(),
                format!("{:.16e}", self.mu_exact[j]),
                format!("{:.16e}", self.mu_approx[j]),
                format!("{:.16e}", self.delta_mu[j]),
            ];
            if let Some(p) = &self.delta_phi {
                row.push(format!("{:.16e}", p[j]));
            }
            wr.write_record(&row).map_err(|e| Error::Parse(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Truncation residual of the Galerkin kernel after `n` modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MercerCheck {
    /// `‖K_h - K_N‖²_{L²(Ω×Ω)}` from the matrices.
    pub residual: f64,
    /// `Σ_{j>N} μ̌_j²` over the full discrete spectrum.
    pub tail: f64,
}

/// With `M = L Lᵀ`, the Galerkin kernel has L²-Gram representation
/// `S = L⁻¹ K L⁻ᵀ`, so the truncation residual is `‖S - Σ_{j≤N} μ_j v_j v_jᵀ‖_F²`
/// with `v_j = Lᵀ c_j`.
pub fn mercer_truncation_check(mats: &KernelMatrices, report: &KernelEigReport, n: usize) -> Result<MercerCheck> {
    let dim = mats.k.nrows();
    if n > report.eigenvalues.len() {
        return Err(Error::InvalidConfig(format!("truncation {n} exceeds the {} computed pairs", report.eigenvalues.len())));
    }
    let l = cholesky_lower(&mats.m)?;
    let mut c = mats.k.clone();
    solve_lower_triangular_in_place(l.as_ref(), c.as_mut(), Par::Seq);
    let mut s = c.transpose().to_owned();
    solve_lower_triangular_in_place(l.as_ref(), s.as_mut(), Par::Seq);
    let full_s = s.clone();
    let mut v = Mat::<f64>::zeros(dim, n);
    let lead = report.vectors.subcols(0, n);
    matmul(v.as_mut(), Accum::Replace, l.transpose(), lead, 1.0, Par::Seq);
    let scaled = Mat::from_fn(dim, n, |i, j| v[(i, j)] * report.eigenvalues[j]);
    matmul(s.as_mut(), Accum::Add, scaled.as_ref(), v.transpose(), -1.0, Par::Seq);
    let residual = s.col_iter().map(|c| c.iter().map(|x| x * x).sum::<f64>()).sum();
    let gram = Mat::from_fn(dim, dim, |i, j| 0.5 * (full_s[(i, j)] + full_s[(j, i)]));
    let mut sorted = eig_symmetric(&gram, false)?.eigenvalues;
    sorted.sort_by(|a, b| b.total_cmp(a));
    let tail = sorted[n..].iter().map(|m| m * m).sum();
    Ok(MercerCheck { residual, tail })
}

/// `J_m(x) = (1/2π) ∫_0^{2π} cos(mτ - x sin τ) dτ` by the trapezoid rule,
/// which is spectrally accurate for this periodic integrand.
pub fn bessel_j(m: u32, x: f64) -> f64 {
    let n = 2 * (x.abs() as usize + m as usize) + 64;
    let mut s = 0.0;
    for k in 0..n {
        let t = 2.0 * PI * k as f64 / n as f64;
        s += (m as f64 * t - x * t.sin()).cos();
    }
    s / n as f64
}

/// Positive zeros of `J_m` below `x_max`, ascending.
pub fn bessel_zeros(m: u32, x_max: f64) -> Vec<f64> {
    let step = 0.05;
    let mut zeros = Vec::new();
    let mut a = (m as f64).max(step);
    let mut fa = bessel_j(m, a);
    while a < x_max {
        let b = a + step;
        let fb = bessel_j(m, b);
        if fa == 0.0 {
            zeros.push(a);
        } else if fa * fb < 0.0 {
            let (mut lo, mut hi, mut flo) = (a, b, fa);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let fm = bessel_j(m, mid);
                if fm * flo <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    flo = fm;
                }
            }
            zeros.push(0.5 * (lo + hi));
        }
        a = b;
        fa = fb;
    }
    zeros
}

/// Largest `count` eigenvalues `1/j²_{m,k}` of the inverse Dirichlet
/// Laplacian on the unit disc; `m ≥ 1` modes appear twice.
pub fn disc_eigenvalues(count: usize) -> Vec<f64> {
    // Weyl: about x²/4 eigenvalues of -Δ below x²
    let x_max = 2.0 * (count as f64).sqrt() * 1.2 + 10.0;
    let mut mus = Vec::new();
    let mut m = 0;
    while (m as f64) < x_max {
        for z in bessel_zeros(m, x_max) {
            let mu = 1.0 / (z * z);
            mus.push(mu);
            if m > 0 {
                mus.push(mu);
            }
        }
        m += 1;
    }
    mus.sort_by(|a, b| b.total_cmp(a));
    mus.truncate(count);
    mus
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{ConstantKernel, ExactKernel};
    use crate::problems::{mesh_unit_disc, Domain};

    #[test]
    fn bessel_values_and_zeros() {
        assert!((bessel_j(0, 0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_j(0, 1.0) - 0.765_197_686_557_966_6).abs() < 1e-14);
        assert!((bessel_j(1, 2.5) - 0.497_094_102_464_274_4).abs() < 1e-14);
        let z0 = bessel_zeros(0, 10.0);
        assert!((z0[0] - 2.404_825_557_695_773).abs() < 1e-12);
        assert!((z0[1] - 5.520_078_110_286_311).abs() < 1e-12);
        assert!((bessel_zeros(1, 5.0)[0] - 3.831_705_970_207_512).abs() < 1e-12);
        let mus = disc_eigenvalues(4);
        assert!((mus[0] - 1.0 / 2.404_825_557_695_773f64.powi(2)).abs() < 1e-14);
        assert_eq!(mus[1], mus[2]);
    }

    #[test]
    fn mass_matrix_integrates_constants() {
        for kind in [ElementKind::Linear, ElementKind::Quadratic] {
            let s = FeSpace::interval(0.125, kind).unwrap();
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            let m = s.mass_matrix();
            assert!(cholesky_lower(&m).is_ok());
            if kind == ElementKind::Linear {
                assert!((m[(0, 0)] - 2.0 * 0.125 / 3.0).abs() < 1e-15);
                assert!((m[(0, 1)] - 0.125 / 6.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_kernel_is_rank_one() {
        let s = FeSpace::interval(0.1, ElementKind::Linear).unwrap();
        let k1 = ConstantKernel { d: 1, domain: Domain::UnitInterval, value: 1.0 };
        let mats = assemble_kernel_matrices(&k1, &s, &DiagonalPolicy::for_mesh(0.1)).unwrap();
        let m = s.load_vector(|_| 1.0);
        for a in 0..s.ndof {
            for b in 0..s.ndof {
                assert!((mats.k[(a, b)] - m[a] * m[b]).abs() < 1e-14);
            }
        }
        let rep = solve_kernel_eigs(&mats, s.ndof).unwrap();
        assert!(rep.eigenvalues[1].abs() < 1e-12);
        let chk = mercer_truncation_check(&mats, &rep, 1).unwrap();
        assert!(chk.residual.abs() < 1e-12 && chk.tail < 1e-12);
        let full = mercer_truncation_check(&mats, &rep, s.ndof).unwrap();
        assert!(full.residual.abs() < 1e-12);
    }

    #[test]
    fn poisson_kernel_spectrum() {
        let h = 1.0 / 256.0;
        let s = FeSpace::interval(h, ElementKind::Quadratic).unwrap();
        let mats = assemble_kernel_matrices(&ExactKernel::Poisson1d, &s, &DiagonalPolicy::for_mesh(h)).unwrap();
        for a in 0..s.ndof {
            for b in 0..a {
                assert_eq!(mats.k[(a, b)], mats.k[(b, a)]);
            }
        }
        let rep = solve_kernel_eigs(&mats, 20).unwrap();
        let prof = spectral_bias_profile(&s, &rep, &ReferenceSpectrum::poisson1d(&s, 20)).unwrap();
        assert!(prof.delta_mu.iter().all(|d| *d < 1e-3), "{:?}", prof.delta_mu);
        assert!(prof.delta_phi.as_ref().unwrap()[..5].iter().all(|d| *d < 1e-3));
        // M-orthonormal vectors
        let c0: Vec<f64> = rep.vectors.col(0).iter().copied().collect();
        let c1: Vec<f64> = rep.vectors.col(1).iter().copied().collect();
        let ip = |a: &[f64], b: &[f64]| -> f64 { (0..s.ndof).map(|i| (0..s.ndof).map(|j| a[i] * mats.m[(i, j)] * b[j]).sum::<f64>()).sum() };
        assert!((ip(&c0, &c0) - 1.0).abs() < 1e-10 && ip(&c0, &c1).abs() < 1e-10);
        // Mercer tail against Σ_{j>10} 1/(jπ)^4
        let all = solve_kernel_eigs(&mats, s.ndof).unwrap();
        let chk = mercer_truncation_check(&mats, &all, 10).unwrap();
        let analytic: f64 = (PI.powi(4) / 90.0 - (1..=10).map(|j| (j as f64).powi(-4)).sum::<f64>()) / PI.powi(4);
        assert!((chk.residual - analytic).abs() < 1e-2 * analytic, "{} {}", chk.residual, analytic);
        assert!((chk.residual - chk.tail).abs() < 1e-10 * analytic);
        assert!((mats.kernel_norm_sq - 1.0 / 90.0).abs() < 1e-6);
        // identical reports give a zero profile
        let same = spectral_bias_profile(&s, &rep, &ReferenceSpectrum::from_report(&s, &rep)).unwrap();
        assert!(same.delta_mu.iter().chain(same.delta_phi.as_ref().unwrap()).all(|d| *d < 1e-14));
        assert!(prof.median_delta_mu(1, 10).unwrap() < 1e-3);
    }

    #[test]
    fn disc_kernel_leading_eigenvalues() {
        let mesh = mesh_unit_disc(0.15).unwrap();
        let s = FeSpace::disc_linear(&mesh);
        let mats = assemble_kernel_matrices(&ExactKernel::Disc2d, &s, &DiagonalPolicy::for_mesh(0.15)).unwrap();
        let rep = solve_kernel_eigs(&mats, 3).unwrap();
        let prof = spectral_bias_profile(&s, &rep, &ReferenceSpectrum::disc(3)).unwrap();
        assert!(prof.delta_mu.iter().all(|d| *d < 0.05), "{:?}", prof.delta_mu);
        assert!(prof.delta_phi.is_none());
    }

    #[test]
    fn profile_csv_round_trip() {
        let p = BiasProfile { mu_exact: vec![0.1, 1.0 / 3.0], mu_approx: vec![0.1, 0.3], delta_mu: vec![0.0, 0.1], delta_phi: Some(vec![0.0, 0.2]) };
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        let rows: Vec<_> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1][1].parse::<f64>().unwrap(), 1.0 / 3.0);
    }
}
