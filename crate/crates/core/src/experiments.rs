//! Parameter sweeps shared by the command-line tool and the acceptance
//! suite: Krylov tables, Schwarz runs, hybrid and multigrid traces, kernel
//! spectra and the fast solver.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hybrid::{amplification_radius, hybrid_iterate, jacobi_matrix, run_multigrid, HybridConfig, MgHierarchy, Smoother};
use crate::iterative::{
    bicg, condition_number_symmetric, damped_jacobi, gmres, preconditioned_spectrum, IterationTrace, ModeBasis, SolveOptions,
};
use crate::kernel::{reconstruct_solution, DiagonalPolicy, Kernel, Quadrature};
use crate::linalg::{direct_solve, max_abs, sub};
use crate::precond::{build_dense, build_schwarz, build_subdomains};
use crate::problems::{assemble, mesh_unit_disc, problem, Domain, ProblemId};
use crate::spectral::{
    assemble_kernel_matrices, solve_kernel_eigs, spectral_bias_profile, BiasProfile, ElementKind, FeSpace, KernelEigReport,
    ReferenceSpectrum,
};

/// Largest system for which dense spectra are computed.
pub const DENSE_EIG_LIMIT: usize = 7500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KrylovMethod {
    Bicg,
    Gmres,
}

/// One mesh size of a preconditioned-vs-plain comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct KrylovRow {
    pub h: f64,
    pub n: usize,
    pub kappa_prec: Option<f64>,
    pub kappa_a: Option<f64>,
    pub iters_prec: usize,
    pub iters_base: usize,
    pub err_prec: f64,
    pub err_base: f64,
    /// Iterations of the preconditioned run to reach `tight_error`.
    pub iters_tight: Option<usize>,
    pub err_tight: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovStudy {
    pub method: KrylovMethod,
    /// Relative residual at which the plain solver stops, unless
    /// `base_budget` is given.
    pub base_tol: f64,
    pub prec_maxiter: usize,
    /// Optional absolute error target for a second preconditioned run.
    pub tight_error: Option<f64>,
    pub eig_limit: usize,
}

impl KrylovStudy {
    pub fn for_problem(id: ProblemId) -> Self {
        match id {
            ProblemId::Poisson1d => Self { method: KrylovMethod::Bicg, base_tol: 1e-8, prec_maxiter: 100, tight_error: None, eig_limit: DENSE_EIG_LIMIT },
            ProblemId::Helmholtz1d => Self { method: KrylovMethod::Gmres, base_tol: 1e-8, prec_maxiter: 100, tight_error: Some(1e-8), eig_limit: DENSE_EIG_LIMIT },
            ProblemId::PoissonDisc => Self { method: KrylovMethod::Bicg, base_tol: 1e-12, prec_maxiter: 200, tight_error: None, eig_limit: DENSE_EIG_LIMIT },
        }
    }
}

/// Default mesh sweeps per problem.
pub fn table_meshes(id: ProblemId) -> Vec<f64> {
    match id {
        ProblemId::Poisson1d | ProblemId::Helmholtz1d => (0..4).map(|i| 0.5f64.powi(6 + 2 * i)).collect(),
        ProblemId::PoissonDisc => vec![0.1, 0.05, 0.025, 0.0125],
    }
}

/// Tabulated iteration budgets of the plain Helmholtz GMRES runs.
pub fn helmholtz_budget(h: f64) -> Option<usize> {
    let e = (-h.log2()).round() as i32;
    match e {
        6 => Some(30),
        8 => Some(252),
        10 => Some(1014),
        12 => Some(4058),
        _ => None,
    }
}

fn run_krylov(
    method: KrylovMethod,
    a: &crate::linalg::CsrMatrix,
    f: &[f64],
    prec: Option<&dyn crate::linalg::LinearOperator>,
    opts: &SolveOptions,
) -> Result<IterationTrace> {
    let x0 = vec![0.0; f.len()];
    Ok(match method {
        KrylovMethod::Bicg => bicg(a, f, prec, &x0, opts)?.1,
        KrylovMethod::Gmres => gmres(a, f, prec, &x0, opts, 1)?.1,
    })
}

/// Runs the plain solver (to `base_tol`, or to the tabulated budget when
/// `budget` returns one), records its error against a direct solve, then
/// runs the preconditioned solver until its error is no larger or its
/// residual meets `base_tol`.
pub fn krylov_table(
    kernel: &dyn Kernel,
    id: ProblemId,
    hs: &[f64],
    study: &KrylovStudy,
    budget: &dyn Fn(f64) -> Option<usize>,
) -> Result<Vec<KrylovRow>> {
    let p = problem(id);
    let mut rows = Vec::with_capacity(hs.len());
    for &h in hs {
        let s = assemble(&p, h)?;
        let n = s.len();
        let u = direct_solve(&s.matrix, &s.rhs)?;
        let base = match budget(h) {
            Some(k) => run_krylov(study.method, &s.matrix, &s.rhs, None, &SolveOptions::new(0.0, k).with_reference(&u))?,
            None => run_krylov(study.method, &s.matrix, &s.rhs, None, &SolveOptions::new(study.base_tol, 4 * n).with_reference(&u))?,
        };
        let err_base = base.final_error().unwrap_or(f64::NAN);
        let b = build_dense(kernel, &s.nodes, &DiagonalPolicy::for_nodal_inverse(h), s.green_weight, "kernel")?;
        let prec = run_krylov(
            study.method,
            &s.matrix,
            &s.rhs,
            Some(&b),
            &SolveOptions::new(study.base_tol, study.prec_maxiter).with_reference(&u).with_err_target(err_base),
        )?;
        let (iters_tight, err_tight) = match study.tight_error {
            Some(t) => {
                let tr = run_krylov(
                    study.method,
                    &s.matrix,
                    &s.rhs,
                    Some(&b),
                    &SolveOptions::new(0.0, study.prec_maxiter).with_reference(&u).with_err_target(t),
                )?;
                (tr.first_error_below(t), tr.final_error())
            }
            None => (None, None),
        };
        let (kappa_prec, kappa_a) = if n <= study.eig_limit {
            (Some(preconditioned_spectrum(&s.matrix, &b.matrix)?.condition), Some(condition_number_symmetric(&s.matrix)?))
        } else {
            (None, None)
        };
        log::info!("h = {h}: n = {n}, base {} its, preconditioned {} its", base.iterations, prec.iterations);
        rows.push(KrylovRow {
            h,
            n,
            kappa_prec,
            kappa_a,
            iters_prec: prec.iterations,
            iters_base: base.iterations,
            err_prec: prec.final_error().unwrap_or(f64::NAN),
            err_base,
            iters_tight,
            err_tight,
        });
    }
    Ok(rows)
}

/// Two-level Schwarz run on the unit interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SchwarzRow {
    pub h: f64,
    pub coarse_h: f64,
    pub overlap: usize,
    pub n: usize,
    pub subdomains: usize,
    /// Lanczos estimate from the BiCG coefficients.
    pub kappa: f64,
    pub iters: usize,
    pub err: f64,
}

pub fn schwarz_row(kernel: &dyn Kernel, id: ProblemId, h: f64, coarse_h: f64, overlap: usize, tol: f64) -> Result<SchwarzRow> {
    let p = problem(id);
    if p.domain != Domain::UnitInterval {
        return Err(Error::InvalidConfig("the Schwarz preconditioner is implemented on the unit interval".into()));
    }
    let s = assemble(&p, h)?;
    let u = direct_solve(&s.matrix, &s.rhs)?;
    let sub = build_subdomains(h, coarse_h, overlap)?;
    let count = sub.len();
    let m = build_schwarz(&s.matrix, sub, Some(kernel), s.green_weight)?;
    let (_, t) = bicg(&s.matrix, &s.rhs, Some(&m), &vec![0.0; s.len()], &SolveOptions::new(tol, 500).with_reference(&u))?;
    Ok(SchwarzRow {
        h,
        coarse_h,
        overlap,
        n: s.len(),
        subdomains: count,
        kappa: t.ritz_condition()?,
        iters: t.iterations,
        err: t.final_error().unwrap_or(f64::NAN),
    })
}

/// Jacobi and hybrid traces on one system.
#[derive(Debug, Clone)]
pub struct HybridStudy {
    pub h: f64,
    pub jacobi: IterationTrace,
    pub hybrid: Vec<(usize, IterationTrace)>,
    /// Spectral radius of the error propagator per period, when small
    /// enough for a dense eigensolve.
    pub radius: Vec<(usize, Option<f64>)>,
}

pub fn hybrid_study(
    kernel: &dyn Kernel,
    id: ProblemId,
    h: f64,
    periods: &[usize],
    maxiter: usize,
    err_tol: f64,
    with_modes: bool,
) -> Result<HybridStudy> {
    let p = problem(id);
    let s = assemble(&p, h)?;
    let n = s.len();
    let u = direct_solve(&s.matrix, &s.rhs)?;
    let basis = if with_modes { Some(ModeBasis::new(&s.matrix)?) } else { None };
    let mut opts = SolveOptions::new(0.0, maxiter).with_reference(&u).with_err_target(err_tol);
    if let Some(b) = &basis {
        opts = opts.with_modes(b);
    }
    let omega = HybridConfig::default().omega;
    let (_, jacobi) = damped_jacobi(&s.matrix, &s.rhs, &vec![0.0; n], omega, &opts)?;
    let b = build_dense(kernel, &s.nodes, &DiagonalPolicy::for_nodal_inverse(h), s.green_weight, "kernel")?;
    let mut hybrid = Vec::new();
    let mut radius = Vec::new();
    let dense = if n <= 1100 { Some((s.matrix.to_dense(), jacobi_matrix(&s.matrix, omega)?)) } else { None };
    for &k in periods {
        let cfg = HybridConfig { period: k, omega };
        let (_, t) = hybrid_iterate(&s.matrix, &s.rhs, &b, &cfg, &vec![0.0; n], &opts)?;
        hybrid.push((k, t));
        let r = match &dense {
            Some((a, bj)) => Some(amplification_radius(a, bj, &b.matrix, k)?),
            None => None,
        };
        radius.push((k, r));
    }
    Ok(HybridStudy { h, jacobi, hybrid, radius })
}

/// Multigrid from `U = 0` until `tol` relative residual; `kernel = None`
/// gives the classical cycle.
pub fn multigrid_study(
    kernel: Option<&dyn Kernel>,
    id: ProblemId,
    hs: &[f64],
    cycles: usize,
    tol: f64,
) -> Result<(IterationTrace, String)> {
    let p = problem(id);
    let fine = assemble(&p, hs[0])?;
    let u = direct_solve(&fine.matrix, &fine.rhs)?;
    let smoother = match kernel {
        Some(k) => {
            let b = build_dense(k, &fine.nodes, &DiagonalPolicy::for_nodal_inverse(fine.h), fine.green_weight, "kernel")?;
            Smoother::Hybrid(Arc::new(b))
        }
        None => Smoother::Jacobi,
    };
    let hier = MgHierarchy::geometric_1d(&p, hs, smoother)?;
    let (_, t) = run_multigrid(&hier, &fine.rhs, &SolveOptions::new(tol, cycles).with_reference(&u))?;
    Ok((t, hier.diagram()))
}

/// Galerkin spectrum of `kernel` with the default space for the problem:
/// quadratic elements at `h = 2^-10` in 1D, linear elements at `h = 0.045`
/// on the disc.
pub fn default_space(id: ProblemId) -> Result<FeSpace> {
    match problem(id).domain {
        Domain::UnitInterval => FeSpace::interval(0.5f64.powi(10), ElementKind::Quadratic),
        Domain::UnitDisc => Ok(FeSpace::disc_linear(&mesh_unit_disc(0.045)?)),
    }
}

/// Reference spectrum when one is known in closed form.
pub fn reference_spectrum(id: ProblemId, space: &FeSpace, count: usize) -> Option<ReferenceSpectrum> {
    match id {
        ProblemId::Poisson1d => Some(ReferenceSpectrum::poisson1d(space, count)),
        ProblemId::PoissonDisc => Some(ReferenceSpectrum::disc(count)),
        ProblemId::Helmholtz1d => None,
    }
}

pub fn spectrum_study(kernel: &dyn Kernel, id: ProblemId, space: &FeSpace, count: usize) -> Result<(KernelEigReport, Option<BiasProfile>)> {
    let mats = assemble_kernel_matrices(kernel, space, &DiagonalPolicy::for_mesh(space.h))?;
    let rep = solve_kernel_eigs(&mats, count.min(space.ndof))?;
    let prof = match reference_spectrum(id, space, count) {
        Some(r) => Some(spectral_bias_profile(space, &rep, &r)?),
        None => None,
    };
    Ok((rep, prof))
}

/// Kernel-quadrature solution on evaluation points.
#[derive(Debug, Clone, PartialEq)]
pub struct FastSolve {
    pub points: Vec<f64>,
    pub approx: Vec<f64>,
    pub exact: Option<Vec<f64>>,
    pub max_error: Option<f64>,
}

/// `ǔ(x) = Σ_q w_q f(y_q) Ǧ(x, y_q)`, midpoint rule with `h` in 1D and the
/// three-point triangle rule on the disc mesh of size `h`; evaluated at
/// `eval` points (or a default grid when empty).
pub fn fast_solve(kernel: &dyn Kernel, id: ProblemId, h: f64, eval: &[f64]) -> Result<FastSolve> {
    let p = problem(id);
    let (quad, default_eval) = match p.domain {
        Domain::UnitInterval => {
            let cells = (1.0 / h).round() as usize;
            let pts: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
            (Quadrature::midpoint_1d(cells), pts)
        }
        Domain::UnitDisc => {
            let mesh = mesh_unit_disc(h)?;
            let mut pts = Vec::new();
            for i in 0..=20 {
                for j in 0..=20 {
                    let (x, y) = (-1.0 + 0.1 * i as f64, -1.0 + 0.1 * j as f64);
                    if x * x + y * y < 0.95 * 0.95 {
                        pts.push(x);
                        pts.push(y);
                    }
                }
            }
            (Quadrature::triangles(&mesh), pts)
        }
    };
    let points = if eval.is_empty() { default_eval } else { eval.to_vec() };
    let approx = reconstruct_solution(kernel, &p.f, &points, &quad, &DiagonalPolicy::for_mesh(h))?;
    let d = p.dim();
    let exact: Option<Vec<f64>> = p.exact_u.as_ref().map(|u| points.chunks(d).map(|x| u(x)).collect());
    let max_error = exact.as_ref().map(|e| max_abs(&sub(&approx, e)));
    Ok(FastSolve { points, approx, exact, max_error })
}

/// Max-abs error of a 1D kernel against another on the `(m+1)²` grid of
/// [0, 1]², diagonal included.
pub fn grid_error_1d(approx: &dyn Kernel, exact: &dyn Kernel, m: usize) -> f64 {
    let mut xs = Vec::with_capacity((m + 1) * (m + 1));
    let mut ys = Vec::with_capacity((m + 1) * (m + 1));
    for i in 0..=m {
        for j in 0..=m {
            xs.push(i as f64 / m as f64);
            ys.push(j as f64 / m as f64);
        }
    }
    let a = approx.eval_batch(&xs, &ys);
    let e = exact.eval_batch(&xs, &ys);
    max_abs(&sub(&a, &e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ExactKernel;

    #[test]
    fn exact_kernel_table_rows() {
        let study = KrylovStudy::for_problem(ProblemId::Poisson1d);
        let rows = krylov_table(&ExactKernel::Poisson1d, ProblemId::Poisson1d, &[0.5f64.powi(5)], &study, &|_| None).unwrap();
        let r = &rows[0];
        assert_eq!(r.iters_base, 31);
        assert!(r.err_prec < 1e-12);
        assert!((r.kappa_prec.unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn exact_kernel_schwarz_and_hybrid() {
        let row = schwarz_row(&ExactKernel::Poisson1d, ProblemId::Poisson1d, 0.5f64.powi(10), 0.5f64.powi(6), 8, 1e-8).unwrap();
        assert!(row.iters < 40 && row.kappa < 15.0 && row.subdomains == 64);
        let st = hybrid_study(&ExactKernel::Poisson1d, ProblemId::Poisson1d, 1.0 / 32.0, &[2, 4], 20, 1e-12, true).unwrap();
        assert!(st.hybrid.iter().all(|(k, t)| t.iterations == *k));
        assert_eq!(st.jacobi.neural_applications, 0);
        assert!(st.radius.iter().all(|(_, r)| r.unwrap() < 1e-8));
        assert_eq!(st.jacobi.modes.len(), st.jacobi.steps.len());
    }

    #[test]
    fn grid_error_of_identical_kernels() {
        assert_eq!(grid_error_1d(&ExactKernel::Poisson1d, &ExactKernel::Poisson1d, 10), 0.0);
        let fs = fast_solve(&ExactKernel::Poisson1d, ProblemId::Poisson1d, 0.5f64.powi(8), &[]).unwrap();
        let fine = fast_solve(&ExactKernel::Poisson1d, ProblemId::Poisson1d, 0.5f64.powi(10), &[]).unwrap();
        assert!(fine.max_error.unwrap() < fs.max_error.unwrap() / 10.0);
    }
}
