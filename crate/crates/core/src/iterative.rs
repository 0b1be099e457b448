//! Stationary and Krylov solvers, dense spectra, condition numbers and
//! mode-wise error decomposition.

use std::io::Write;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par, Side};

use crate::error::{check_dim, non_finite, Error, Result};
use crate::linalg::{axpy, dot, norm2, residual, CsrMatrix, LinearOperator};

/// Per-iteration history. Index 0 is the initial guess.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationTrace {
    /// `‖U - U^k‖₂` against the reference, empty without one.
    pub errors: Vec<f64>,
    /// `‖F - A U^k‖₂`, recomputed from scratch.
    pub residuals: Vec<f64>,
    /// Iteration index of every logged entry.
    pub steps: Vec<usize>,
    /// Mode-wise error rows, when requested.
    pub modes: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of neural preconditioner applications.
    pub neural_applications: usize,
    /// BiCG step lengths `(α_k, β_k)`, `β_1 = 0`.
    pub lanczos: Vec<(f64, f64)>,
}

impl IterationTrace {
    pub(crate) fn log(&mut self, k: usize, a: &dyn LinearOperator, f: &[f64], u: &[f64], opts: &SolveOptions) -> Result<(f64, Option<f64>)> {
        let reference = opts.reference;
        let r = norm2(&residual(a, f, u));
        if !r.is_finite() {
            return Err(non_finite(format!("iterate {k}")));
        }
        self.steps.push(k);
        self.residuals.push(r);
        let e = reference.map(|u_ref| u.iter().zip(u_ref).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt());
        if let Some(e) = e {
            self.errors.push(e);
        }
        if let (Some(basis), Some(u_ref)) = (opts.modes, reference) {
            let err: Vec<f64> = u.iter().zip(u_ref).map(|(p, q)| q - p).collect();
            self.modes.push(basis.coefficients(&err));
        }
        Ok((r, e))
    }

    /// Ritz values of the Lanczos matrix implied by the BiCG coefficients.
    /// Meaningful when `A` and the preconditioner are symmetric and the
    /// preconditioner is definite (BiCG then coincides with CG).
    pub fn ritz_values(&self) -> Result<Vec<f64>> {
        let m = self.lanczos.len();
        if m == 0 {
            return Ok(Vec::new());
        }
        let mut t = Mat::<f64>::zeros(m, m);
        for (j, &(alpha, beta)) in self.lanczos.iter().enumerate() {
            t[(j, j)] = 1.0 / alpha;
            if j > 0 {
                let alpha_prev = self.lanczos[j - 1].0;
                t[(j, j)] += beta / alpha_prev;
                let off = beta.abs().sqrt() / alpha_prev;
                t[(j - 1, j)] = off;
                t[(j, j - 1)] = off;
            }
        }
        Ok(eig_symmetric(&t, false)?.eigenvalues)
    }

    /// `λ_max / λ_min` over the Ritz values.
    pub fn ritz_condition(&self) -> Result<f64> {
        let r = self.ritz_values()?;
        match (r.first(), r.last()) {
            (Some(lo), Some(hi)) => Ok(hi.abs().max(lo.abs()) / hi.abs().min(lo.abs())),
            _ => Err(Error::Eigen("no BiCG steps recorded".into())),
        }
    }

    pub fn final_error(&self) -> Option<f64> {
        self.errors.last().copied()
    }

    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::NAN)
    }

    /// First logged iteration whose error is at most `tol`.
    pub fn first_error_below(&self, tol: f64) -> Option<usize> {
        self.errors.iter().position(|e| *e <= tol).map(|i| self.steps[i])
    }

    /// CSV with columns `k, err_l2, res_l2` and up to 64 evenly strided
    /// mode columns.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let n_modes = self.modes.first().map_or(0, Vec::len);
        let picked = strided_modes(n_modes, 64);
        let mut header = vec!["k".to_string(), "err_l2".into(), "res_l2".into()];
        header.extend(picked.iter().map(|j| format!("m_{}", j + 1)));
        wr.write_record(&header).map_err(csv_err)?;
        for (i, k) in self.steps.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.push(self.errors.get(i).map_or(String::new(), |e| format!("{e:.16e}")));
            row.push(format!("{:.16e}", self.residuals[i]));
            if let Some(m) = self.modes.get(i) {
                row.extend(picked.iter().map(|&j| format!("{:.16e}", m[j])));
            }
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Indices `0, s, 2s, ...` always including the last, at most `cap` of them.
pub fn strided_modes(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * (n - 1) / (cap - 1)).collect()
}

/// Stopping rule shared by the solvers.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions<'a> {
    /// Stop when `‖R‖₂ / ‖F‖₂ <= tol`.
    pub tol: f64,
    pub maxiter: usize,
    /// Reference solution for error logging.
    pub reference: Option<&'a [f64]>,
    /// Stop as soon as the error drops to this value.
    pub err_target: Option<f64>,
    /// Log mode-wise errors in this basis (needs `reference`).
    pub modes: Option<&'a ModeBasis>,
}

impl<'a> SolveOptions<'a> {
    pub fn new(tol: f64, maxiter: usize) -> Self {
        Self { tol, maxiter, reference: None, err_target: None, modes: None }
    }

    pub fn with_reference(mut self, u: &'a [f64]) -> Self {
        self.reference = Some(u);
        self
    }

    pub fn with_err_target(mut self, e: f64) -> Self {
        self.err_target = Some(e);
        self
    }

    pub fn with_modes(mut self, basis: &'a ModeBasis) -> Self {
        self.modes = Some(basis);
        self
    }

    pub(crate) fn done(&self, r: f64, fnorm: f64, e: Option<f64>) -> bool {
        let by_res = r <= self.tol * fnorm;
        let by_err = matches!((self.err_target, e), (Some(t), Some(e)) if e <= t);
        by_res || by_err
    }
}

/// `U <- U + ω D^{-1} (F - A U)`.
pub fn damped_jacobi(a: &CsrMatrix, f: &[f64], u0: &[f64], omega: f64, opts: &SolveOptions) -> Result<(Vec<f64>, IterationTrace)> {
    let n = a.nrows();
    check_dim(n, f.len())?;
    check_dim(n, u0.len())?;
    let diag = a.diagonal();
    if let Some(i) = diag.iter().position(|d| *d == 0.0) {
        return Err(Error::InvalidConfig(format!("zero diagonal entry at row {i}")));
    }
    let fnorm = norm2(f);
    let mut u = u0.to_vec();
    let mut trace = IterationTrace::default();
    let (r0, e0) = trace.log(0, a, f, &u, opts)?;
    if opts.done(r0, fnorm, e0) {
        trace.converged = true;
        return Ok((u, trace));
    }
    for k in 1..=opts.maxiter {
        let r = residual(a, f, &u);
        for i in 0..n {
            u[i] += omega * r[i] / diag[i];
        }
        let (rn, e) = trace.log(k, a, f, &u, opts)?;
        trace.iterations = k;
        if opts.done(rn, fnorm, e) {
            trace.converged = true;
            break;
        }
    }
    Ok((u, trace))
}

/// Preconditioned biconjugate gradients with shadow residual `r̃₀ = r₀`.
pub fn bicg(
    a: &dyn LinearOperator,
    f: &[f64],
    prec: Option<&dyn LinearOperator>,
    u0: &[f64],
    opts: &SolveOptions,
) -> Result<(Vec<f64>, IterationTrace)> {
    let n = a.dim();
    check_dim(n, f.len())?;
    check_dim(n, u0.len())?;
    if let Some(p) = prec {
        check_dim(n, p.dim())?;
    }
    let fnorm = norm2(f);
    let mut x = u0.to_vec();
    let mut trace = IterationTrace::default();
    let (r0n, e0) = trace.log(0, a, f, &x, opts)?;
    if opts.done(r0n, fnorm, e0) {
        trace.converged = true;
        return Ok((x, trace));
    }
    let mut r = residual(a, f, &x);
    let mut rt = r.clone();
    let mut z = vec![0.0; n];
    let mut zt = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut pt = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut qt = vec![0.0; n];
    let mut rho_prev = 0.0;
    for k in 1..=opts.maxiter {
        match prec {
            Some(m) => {
                m.apply(&r, &mut z);
                m.apply_transpose(&rt, &mut zt);
                trace.neural_applications += 2;
            }
            None => {
                z.copy_from_slice(&r);
                zt.copy_from_slice(&rt);
            }
        }
        let rho = dot(&z, &rt);
        if rho == 0.0 && norm2(&r) == 0.0 {
            trace.converged = true;
            break;
        }
        if rho == 0.0 || !rho.is_finite() {
            return Err(Error::Breakdown { method: "bicg", iteration: k });
        }
        let mut beta = 0.0;
        if k == 1 {
            p.copy_from_slice(&z);
            pt.copy_from_slice(&zt);
        } else {
            beta = rho / rho_prev;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
                pt[i] = zt[i] + beta * pt[i];
            }
        }
        a.apply(&p, &mut q);
        a.apply_transpose(&pt, &mut qt);
        let denom = dot(&pt, &q);
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Breakdown { method: "bicg", iteration: k });
        }
        let alpha = rho / denom;
        trace.lanczos.push((alpha, beta));
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &q, &mut r);
        axpy(-alpha, &qt, &mut rt);
        rho_prev = rho;
        let (rn, e) = trace.log(k, a, f, &x, opts)?;
        trace.iterations = k;
        if opts.done(rn, fnorm, e) {
            trace.converged = true;
            break;
        }
    }
    Ok((x, trace))
}

/// GMRES result extras: the least-squares residual estimate per step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GmresInfo {
    /// `‖β e₁ - H y‖` of the (preconditioned) Arnoldi problem, index 0 is
    /// the initial residual.
    pub krylov_residuals: Vec<f64>,
    /// The Krylov space became invariant.
    pub happy_breakdown: bool,
}

/// Full (non-restarted) GMRES on `M A U = M F` with Givens rotations.
/// The iterate is formed and logged every `stride` steps (1 = every step)
/// and at termination.
pub fn gmres(
    a: &dyn LinearOperator,
    f: &[f64],
    prec: Option<&dyn LinearOperator>,
    u0: &[f64],
    opts: &SolveOptions,
    stride: usize,
) -> Result<(Vec<f64>, IterationTrace, GmresInfo)> {
    let n = a.dim();
    check_dim(n, f.len())?;
    check_dim(n, u0.len())?;
    let stride = stride.max(1);
    let fnorm = norm2(f);
    let mut trace = IterationTrace::default();
    let mut info = GmresInfo::default();
    let (r0n, e0) = trace.log(0, a, f, u0, opts)?;
    if opts.done(r0n, fnorm, e0) {
        trace.converged = true;
        return Ok((u0.to_vec(), trace, info));
    }
    let apply_m = |v: &[f64], out: &mut [f64], trace: &mut IterationTrace| match prec {
        Some(m) => {
            m.apply(v, out);
            trace.neural_applications += 1;
        }
        None => out.copy_from_slice(v),
    };
    let r = residual(a, f, u0);
    let mut w = vec![0.0; n];
    apply_m(&r, &mut w, &mut trace);
    let beta = norm2(&w);
    info.krylov_residuals.push(beta);
    let mut basis: Vec<Vec<f64>> = vec![w.iter().map(|v| v / beta).collect()];
    let mut h: Vec<Vec<f64>> = Vec::new();
    let mut cs: Vec<f64> = Vec::new();
    let mut sn: Vec<f64> = Vec::new();
    let mut g = vec![beta];
    let mut av = vec![0.0; n];
    let mut x = u0.to_vec();
    let solution = |h: &[Vec<f64>], g: &[f64], basis: &[Vec<f64>]| -> Vec<f64> {
        let m = h.len();
        let mut y = vec![0.0; m];
        for i in (0..m).rev() {
            let mut s = g[i];
            for j in i + 1..m {
                s -= h[j][i] * y[j];
            }
            y[i] = s / h[i][i];
        }
        let mut x = u0.to_vec();
        for (j, yj) in y.iter().enumerate() {
            axpy(*yj, &basis[j], &mut x);
        }
        x
    };
    for k in 1..=opts.maxiter.min(n) {
        a.apply(&basis[k - 1], &mut av);
        apply_m(&av, &mut w, &mut trace);
        // modified Gram-Schmidt with one reorthogonalization pass
        let mut col = vec![0.0; k + 1];
        for _ in 0..2 {
            for (j, v) in basis.iter().enumerate() {
                let c = dot(&w, v);
                col[j] += c;
                axpy(-c, v, &mut w);
            }
        }
        let hn = norm2(&w);
        col[k] = hn;
        for j in 0..k - 1 {
            let t = cs[j] * col[j] + sn[j] * col[j + 1];
            col[j + 1] = -sn[j] * col[j] + cs[j] * col[j + 1];
            col[j] = t;
        }
        let (a0, b0) = (col[k - 1], col[k]);
        let rr = a0.hypot(b0);
        let (c, s) = if rr == 0.0 { (1.0, 0.0) } else { (a0 / rr, b0 / rr) };
        cs.push(c);
        sn.push(s);
        col[k - 1] = rr;
        col[k] = 0.0;
        let gk = g[k - 1];
        g[k - 1] = c * gk;
        g.push(-s * gk);
        col.truncate(k);
        h.push(col);
        let lsq = g[k].abs();
        info.krylov_residuals.push(lsq);
        let breakdown = hn <= 1e-14 * beta;
        let last = k == opts.maxiter.min(n) || breakdown;
        let log_now = k % stride == 0 || last || lsq <= opts.tol * fnorm;
        if log_now {
            x = solution(&h, &g, &basis);
            let (rn, e) = trace.log(k, a, f, &x, opts)?;
            trace.iterations = k;
            if opts.done(rn, fnorm, e) {
                trace.converged = true;
                break;
            }
        }
        if breakdown {
            info.happy_breakdown = true;
            trace.iterations = k;
            break;
        }
        basis.push(w.iter().map(|v| v / hn).collect());
    }
    Ok((x, trace, info))
}

/// Eigenvalues (and optionally eigenvectors) of a dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Real parts, ascending.
    pub eigenvalues: Vec<f64>,
    /// Imaginary parts matching `eigenvalues` (all zero on symmetric paths).
    pub imag: Vec<f64>,
    /// Columns are eigenvectors, in the order of `eigenvalues`.
    pub eigenvectors: Option<Mat<f64>>,
    /// `max |λ| / min |λ|`.
    pub condition: f64,
}

fn modulus_ratio(re: &[f64], im: &[f64]) -> f64 {
    let m: Vec<f64> = re.iter().zip(im).map(|(a, b)| a.hypot(*b)).collect();
    let max = m.iter().cloned().fold(0.0, f64::max);
    let min = m.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

fn check_square(m: &Mat<f64>) -> Result<()> {
    check_dim(m.nrows(), m.ncols())
}

/// Symmetric path: orthogonal reduction, eigenvalues ascending.
pub fn eig_symmetric(m: &Mat<f64>, vectors: bool) -> Result<SpectrumReport> {
    check_square(m)?;
    let (eigenvalues, eigenvectors) = if vectors {
        let e = m.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Eigen(format!("{e:?}")))?;
        let s = e.S().column_vector();
        ((0..m.nrows()).map(|i| s[i]).collect::<Vec<_>>(), Some(e.U().to_owned()))
    } else {
        (m.self_adjoint_eigenvalues(Side::Lower).map_err(|e| Error::Eigen(format!("{e:?}")))?, None)
    };
    let imag = vec![0.0; eigenvalues.len()];
    let condition = modulus_ratio(&eigenvalues, &imag);
    Ok(SpectrumReport { eigenvalues, imag, eigenvectors, condition })
}

/// General path: Hessenberg QR, eigenvalues sorted by real part.
pub fn eig_general(m: &Mat<f64>) -> Result<SpectrumReport> {
    check_square(m)?;
    let ev = m.eigenvalues().map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let mut pairs: Vec<(f64, f64)> = ev.iter().map(|c| (c.re, c.im)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let imag: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let condition = modulus_ratio(&eigenvalues, &imag);
    Ok(SpectrumReport { eigenvalues, imag, eigenvectors: None, condition })
}

/// Lower Cholesky factor of an SPD dense matrix.
pub fn cholesky_lower(m: &Mat<f64>) -> Result<Mat<f64>> {
    let llt = m.llt(Side::Lower).map_err(|e| Error::Factorization(format!("{e:?}")))?;
    Ok(llt.L().to_owned())
}

/// Symmetric-definite generalized problem `K c = μ M c` via `L⁻¹ K L⁻ᵀ`.
/// Eigenvectors, when requested, are M-orthonormal.
pub fn eig_generalized(k: &Mat<f64>, m: &Mat<f64>, vectors: bool) -> Result<SpectrumReport> {
    use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
    check_square(k)?;
    check_dim(k.nrows(), m.nrows())?;
    let l = cholesky_lower(m)?;
    // C = L⁻¹ K L⁻ᵀ
    let mut c = k.clone();
    solve_lower_triangular_in_place(l.as_ref(), c.as_mut(), Par::Seq);
    let mut ct = c.transpose().to_owned();
    solve_lower_triangular_in_place(l.as_ref(), ct.as_mut(), Par::Seq);
    let n = k.nrows();
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (ct[(i, j)] + ct[(j, i)]));
    let mut rep = eig_symmetric(&sym, vectors)?;
    if let Some(v) = rep.eigenvectors.as_mut() {
        solve_upper_triangular_in_place(l.transpose(), v.as_mut(), Par::Seq);
    }
    Ok(rep)
}

pub fn condition_number(m: &Mat<f64>) -> Result<f64> {
    Ok(eig_general(m)?.condition)
}

/// Condition number of a symmetric sparse matrix from its full spectrum.
pub fn condition_number_symmetric(a: &CsrMatrix) -> Result<f64> {
    Ok(eig_symmetric(&a.to_dense(), false)?.condition)
}

/// Spectrum of `B A`. For SPD `A = L Lᵀ` and symmetric `B` this uses the
/// similar symmetric matrix `Lᵀ B L`; otherwise the general path.
pub fn preconditioned_spectrum(a: &CsrMatrix, b: &Mat<f64>) -> Result<SpectrumReport> {
    let n = a.nrows();
    check_dim(n, b.nrows())?;
    let ad = a.to_dense();
    let b_sym = (0..n).all(|i| (0..i).all(|j| b[(i, j)] == b[(j, i)]));
    if a.asymmetry() == 0.0 && b_sym {
        if let Ok(l) = cholesky_lower(&ad) {
            let mut bl = Mat::<f64>::zeros(n, n);
            matmul(bl.as_mut(), Accum::Replace, b.as_ref(), l.as_ref(), 1.0, Par::Seq);
            let mut s = Mat::<f64>::zeros(n, n);
            matmul(s.as_mut(), Accum::Replace, l.transpose(), bl.as_ref(), 1.0, Par::Seq);
            let sym = Mat::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
            return eig_symmetric(&sym, false);
        }
    }
    let mut ba = Mat::<f64>::zeros(n, n);
    matmul(ba.as_mut(), Accum::Replace, b.as_ref(), ad.as_ref(), 1.0, Par::Seq);
    eig_general(&ba)
}

/// Eigenbasis of the damped Jacobi iteration matrix `I - ω D⁻¹ A` for
/// symmetric `A`, normalized in the D-inner product.
#[derive(Debug, Clone)]
pub struct ModeBasis {
    /// Eigenvalues of `D⁻¹ A`, ascending (lowest frequency first).
    pub lambdas: Vec<f64>,
    /// Orthonormal eigenvectors `v_j` of `D^{-1/2} A D^{-1/2}`.
    v: Mat<f64>,
    sqrt_d: Vec<f64>,
}

impl ModeBasis {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        let d = a.diagonal();
        if d.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig("mode basis needs a positive diagonal".into()));
        }
        let sqrt_d: Vec<f64> = d.iter().map(|v| v.sqrt()).collect();
        let ad = a.to_dense();
        let s = Mat::from_fn(n, n, |i, j| 0.5 * (ad[(i, j)] + ad[(j, i)]) / (sqrt_d[i] * sqrt_d[j]));
        let rep = eig_symmetric(&s, true)?;
        Ok(Self { lambdas: rep.eigenvalues, v: rep.eigenvectors.expect("requested"), sqrt_d })
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// `ξ_j = D^{-1/2} v_j`, with `ξ_iᵀ D ξ_j = δ_ij`.
    pub fn mode(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.v[(i, j)] / self.sqrt_d[i]).collect()
    }

    /// Decay factor `1 - ω λ_j` of mode `j` under damped Jacobi.
    pub fn jacobi_factor(&self, j: usize, omega: f64) -> f64 {
        1.0 - omega * self.lambdas[j]
    }

    /// `|⟨E, ξ_j⟩_D|` for every mode.
    pub fn coefficients(&self, e: &[f64]) -> Vec<f64> {
        let n = self.len();
        let w: Vec<f64> = (0..n).map(|i| e[i] * self.sqrt_d[i]).collect();
        (0..n).map(|j| (0..n).map(|i| self.v[(i, j)] * w[i]).sum::<f64>().abs()).collect()
    }
}

/// Mode-wise error matrix: row k holds `M^{[k], j}` for the error history.
pub fn modewise_error(errors: &[Vec<f64>], basis: &ModeBasis) -> Result<Vec<Vec<f64>>> {
    errors
        .iter()
        .map(|e| {
            check_dim(basis.len(), e.len())?;
            Ok(basis.coefficients(e))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dense_solve, Identity};
    use crate::problems::{assemble_poisson1d_fem, manufactured_case};

    fn poisson(n: usize) -> CsrMatrix {
        let p = manufactured_case("poisson1d").unwrap();
        assemble_poisson1d_fem(1.0 / (n + 1) as f64, &p.f).unwrap().matrix
    }

    #[test]
    fn jacobi_on_identity_converges_at_once() {
        let a = CsrMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]);
        let f = [1.0, 2.0, 3.0];
        let (u, t) = damped_jacobi(&a, &f, &[0.0; 3], 1.0, &SolveOptions::new(1e-14, 10)).unwrap();
        assert_eq!(u, f.to_vec());
        assert_eq!(t.iterations, 1);
        assert!(t.converged);
    }

    #[test]
    fn bicg_matches_direct_solve() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)]);
        let f = [1.0, 2.0];
        let (u, t) = bicg(&a, &f, None, &[0.0; 2], &SolveOptions::new(1e-14, 10)).unwrap();
        let d = dense_solve(&a.to_dense(), &f).unwrap();
        assert!((u[0] - d[0]).abs() < 1e-12 && (u[1] - d[1]).abs() < 1e-12);
        assert!(t.iterations <= 2);
    }

    #[test]
    fn bicg_logged_residual_matches_recursion() {
        let a = poisson(31);
        let f: Vec<f64> = (0..31).map(|i| (i as f64 * 0.3).sin() + 1.0).collect();
        let (_, t) = bicg(&a, &f, None, &vec![0.0; 31], &SolveOptions::new(1e-13, 100)).unwrap();
        assert!(t.converged && t.iterations <= 33);
        // recursion-free residuals decrease to tolerance
        assert!(t.final_residual() <= 1e-13 * norm2(&f));
        // nonsymmetric system: BiCG uses the transpose
        let b = CsrMatrix::from_triplets(3, 3, &[(0, 0, 3.0), (0, 1, 1.0), (1, 1, 2.0), (2, 0, 0.5), (2, 2, 4.0), (1, 2, -1.0)]);
        let g = [1.0, 0.0, 2.0];
        let (u, _) = bicg(&b, &g, Some(&Identity(3)), &[0.0; 3], &SolveOptions::new(1e-14, 10)).unwrap();
        let d = dense_solve(&b.to_dense(), &g).unwrap();
        assert!(u.iter().zip(&d).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn ritz_values_bracket_the_spectrum() {
        let n = 40;
        let a = poisson(n);
        let f: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64).sin()).collect();
        let (_, t) = bicg(&a, &f, None, &vec![0.0; n], &SolveOptions::new(1e-12, 200)).unwrap();
        let exact = eig_symmetric(&a.to_dense(), false).unwrap();
        let ritz = t.ritz_values().unwrap();
        let lo = exact.eigenvalues[0];
        let hi = exact.eigenvalues[n - 1];
        assert!((ritz[0] - lo).abs() < 1e-6 * lo);
        assert!((ritz.last().unwrap() - hi).abs() < 1e-6 * hi);
        assert!((t.ritz_condition().unwrap() - exact.condition).abs() < 1e-4 * exact.condition);
    }

    #[test]
    fn gmres_two_eigenvalues_two_steps() {
        // Q diag(1,1,5,5) Qᵀ with a Householder Q
        let v = [0.5, -0.5, 0.5, 0.5];
        let q = Mat::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 } - 2.0 * v[i] * v[j]);
        let dvals = [1.0, 1.0, 5.0, 5.0];
        let a = Mat::from_fn(4, 4, |i, j| (0..4).map(|k| q[(i, k)] * dvals[k] * q[(j, k)]).sum());
        let f = [1.0, 2.0, 3.0, 4.0];
        let (u, t, _) = gmres(&a, &f, None, &[0.0; 4], &SolveOptions::new(1e-12, 10), 1).unwrap();
        assert!(t.iterations <= 2, "{}", t.iterations);
        let d = dense_solve(&a, &f).unwrap();
        assert!(u.iter().zip(&d).all(|(p, q)| (p - q).abs() < 1e-10));
    }

    #[test]
    fn gmres_residuals_are_monotone() {
        let a = poisson(40);
        let f: Vec<f64> = (0..40).map(|i| ((i * i) as f64 * 0.1).cos()).collect();
        let (_, t, info) = gmres(&a, &f, None, &vec![0.0; 40], &SolveOptions::new(1e-12, 60), 1).unwrap();
        for w in t.residuals.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-10));
        }
        for w in info.krylov_residuals.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn spectra_of_known_matrices() {
        let n = 31;
        let h = 1.0 / (n + 1) as f64;
        let a = poisson(n);
        let rep = eig_symmetric(&a.to_dense(), true).unwrap();
        for j in 0..n {
            let exact = 2.0 / h * (1.0 - ((j + 1) as f64 * std::f64::consts::PI * h).cos());
            assert!((rep.eigenvalues[j] - exact).abs() < 1e-10 * exact.max(1.0));
        }
        let id = Mat::<f64>::identity(5, 5);
        assert!(eig_symmetric(&id, false).unwrap().eigenvalues.iter().all(|v| (*v - 1.0).abs() < 1e-15));
        assert!((condition_number(&id).unwrap() - 1.0).abs() < 1e-14);
        let d = Mat::from_fn(2, 2, |i, j| if i == j { [1.0, 10.0][i] } else { 0.0 });
        assert!((condition_number(&d).unwrap() - 10.0).abs() < 1e-12);
        // eigen-residual check
        let v = rep.eigenvectors.unwrap();
        let ad = a.to_dense();
        for j in [0, 15, 30] {
            let x: Vec<f64> = (0..n).map(|i| v[(i, j)]).collect();
            let ax = ad.apply_vec(&x);
            let r: f64 = ax.iter().zip(&x).map(|(p, q)| (p - rep.eigenvalues[j] * q).powi(2)).sum::<f64>().sqrt();
            assert!(r <= 1e-10 * rep.eigenvalues[n - 1]);
        }
    }

    #[test]
    fn generalized_eigenvectors_are_m_orthonormal() {
        let n = 6;
        let k = Mat::from_fn(n, n, |i, j| 1.0 / (1.0 + (i as f64 - j as f64).abs()));
        let m = Mat::from_fn(n, n, |i, j| if i == j { 2.0 + i as f64 } else if i.abs_diff(j) == 1 { 0.5 } else { 0.0 });
        let rep = eig_generalized(&k, &m, true).unwrap();
        let v = rep.eigenvectors.unwrap();
        for a in 0..n {
            for b in 0..n {
                let s: f64 = (0..n).map(|i| (0..n).map(|j| v[(i, a)] * m[(i, j)] * v[(j, b)]).sum::<f64>()).sum();
                assert!((s - if a == b { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
            // K v = μ M v
            for i in 0..n {
                let kv: f64 = (0..n).map(|j| k[(i, j)] * v[(j, a)]).sum();
                let mv: f64 = (0..n).map(|j| m[(i, j)] * v[(j, a)]).sum();
                assert!((kv - rep.eigenvalues[a] * mv).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn preconditioned_spectrum_of_exact_inverse_is_one() {
        let a = poisson(15);
        let inv = {
            let ad = a.to_dense();
            let mut m = Mat::<f64>::zeros(15, 15);
            for j in 0..15 {
                let mut e = vec![0.0; 15];
                e[j] = 1.0;
                let c = dense_solve(&ad, &e).unwrap();
                for i in 0..15 {
                    m[(i, j)] = c[i];
                }
            }
            Mat::from_fn(15, 15, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
        };
        let rep = preconditioned_spectrum(&a, &inv).unwrap();
        assert!((rep.condition - 1.0).abs() < 1e-10);
    }

    #[test]
    fn mode_decomposition() {
        let n = 63;
        let a = poisson(n);
        let basis = ModeBasis::new(&a).unwrap();
        let xi = basis.mode(0);
        let c = basis.coefficients(&xi);
        assert!((c[0] - 1.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| *v < 1e-12));
        // Parseval in the D-inner product
        let e: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let c = basis.coefficients(&e);
        let d = a.diagonal();
        let lhs: f64 = c.iter().map(|v| v * v).sum();
        let rhs: f64 = e.iter().zip(&d).map(|(x, di)| di * x * x).sum();
        assert!((lhs - rhs).abs() < 1e-10 * rhs);
        // exact stationary decay
        let omega = 0.5;
        let u_ref = vec![0.0; n];
        let f = vec![0.0; n];
        let mut u = e.clone();
        let m0 = basis.coefficients(&u);
        for k in 1..=20 {
            let (next, _) = damped_jacobi(&a, &f, &u, omega, &SolveOptions::new(0.0, 1).with_reference(&u_ref)).unwrap();
            u = next;
            let mk = basis.coefficients(&u);
            for j in 0..n {
                let expect = basis.jacobi_factor(j, omega).abs().powi(k) * m0[j];
                assert!((mk[j] - expect).abs() < 1e-10 * m0.iter().cloned().fold(0.0, f64::max));
            }
        }
    }

    #[test]
    fn trace_csv_round_trip() {
        let t = IterationTrace {
            errors: vec![1.0, 0.5],
            residuals: vec![2.0, 0.25],
            steps: vec![0, 1],
            modes: vec![vec![0.1, 0.2], vec![0.3, 1.0 / 3.0]],
            iterations: 1,
            converged: true,
            neural_applications: 0,
            lanczos: Vec::new(),
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), ["k", "err_l2", "res_l2", "m_1", "m_2"]);
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows[1][4].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(strided_modes(255, 64).len(), 64);
        assert_eq!(*strided_modes(255, 64).last().unwrap(), 254);
    }
}
