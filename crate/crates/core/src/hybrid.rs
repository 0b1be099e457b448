//! Hybrid classical/neural stationary iteration and geometric multigrid
//! with a hybrid fine-level smoother.

use std::fmt::Write as _;
use std::sync::Arc;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};

use crate::error::{check_dim, non_finite, Error, Result};
use crate::iterative::{eig_general, IterationTrace, SolveOptions};
use crate::linalg::{norm2, residual, CsrMatrix, LinearOperator, SparseFactor};
use crate::precond::linear_interpolation;
use crate::problems::{assemble_1d, EllipticProblem};

/// Switching schedule: a neural step whenever the 1-based step counter is
/// a multiple of `period`, damped Jacobi otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridConfig {
    pub period: usize,
    pub omega: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self { period: 2, omega: 0.5 }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(Error::InvalidConfig(format!("switching period must be ≥ 2, got {}", self.period)));
        }
        if !(self.omega > 0.0) {
            return Err(Error::InvalidConfig(format!("relaxation must be positive, got {}", self.omega)));
        }
        Ok(())
    }

    pub fn is_neural_step(&self, k: usize) -> bool {
        k % self.period == 0
    }
}

fn inverse_diagonal(a: &CsrMatrix) -> Result<Vec<f64>> {
    a.diagonal()
        .iter()
        .enumerate()
        .map(|(i, d)| if *d == 0.0 { Err(Error::InvalidConfig(format!("zero diagonal entry at row {i}"))) } else { Ok(1.0 / d) })
        .collect()
}

/// `U ← U + B̌ R` on neural steps and `U ← U + ω D⁻¹ R` otherwise. Trace
/// entry 0 is the initial guess `U^{[1]}`.
pub fn hybrid_iterate(
    a: &CsrMatrix,
    f: &[f64],
    neural: &dyn LinearOperator,
    config: &HybridConfig,
    u0: &[f64],
    opts: &SolveOptions,
) -> Result<(Vec<f64>, IterationTrace)> {
    config.validate()?;
    let n = a.nrows();
    check_dim(n, f.len())?;
    check_dim(n, u0.len())?;
    check_dim(n, neural.dim())?;
    let dinv = inverse_diagonal(a)?;
    let fnorm = norm2(f);
    let mut u = u0.to_vec();
    let mut z = vec![0.0; n];
    let mut trace = IterationTrace::default();
    let (r0, e0) = trace.log(0, a, f, &u, opts)?;
    if opts.done(r0, fnorm, e0) {
        trace.converged = true;
        return Ok((u, trace));
    }
    for k in 1..=opts.maxiter {
        let r = residual(a, f, &u);
        if config.is_neural_step(k) {
            neural.apply(&r, &mut z);
            trace.neural_applications += 1;
            u.iter_mut().zip(&z).for_each(|(ui, zi)| *ui += zi);
        } else {
            for i in 0..n {
                u[i] += config.omega * dinv[i] * r[i];
            }
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(format!("hybrid iterate {k}")));
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

fn mat_mul(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    let mut out = Mat::<f64>::zeros(a.nrows(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a.as_ref(), b.as_ref(), 1.0, Par::Seq);
    out
}

/// `(I - B A)^{K-1} (I - B̌ A)` as a dense matrix.
pub fn amplification_matrix(a: &Mat<f64>, b: &Mat<f64>, b_neural: &Mat<f64>, period: usize) -> Result<Mat<f64>> {
    let n = a.nrows();
    check_dim(n, b.nrows())?;
    check_dim(n, b_neural.nrows())?;
    if period == 0 {
        return Err(Error::InvalidConfig("period must be positive".into()));
    }
    let id = Mat::<f64>::identity(n, n);
    let classical = &id - mat_mul(b, a);
    let mut m = &id - mat_mul(b_neural, a);
    for _ in 1..period {
        m = mat_mul(&classical, &m);
    }
    Ok(m)
}

/// Spectral radius of the hybrid error propagator.
pub fn amplification_radius(a: &Mat<f64>, b: &Mat<f64>, b_neural: &Mat<f64>, period: usize) -> Result<f64> {
    let m = amplification_matrix(a, b, b_neural, period)?;
    let rep = eig_general(&m)?;
    Ok(rep.eigenvalues.iter().zip(&rep.imag).map(|(re, im)| re.hypot(*im)).fold(0.0, f64::max))
}

/// `ω D⁻¹` as a dense matrix.
pub fn jacobi_matrix(a: &CsrMatrix, omega: f64) -> Result<Mat<f64>> {
    let dinv = inverse_diagonal(a)?;
    let n = a.nrows();
    Ok(Mat::from_fn(n, n, |i, j| if i == j { omega * dinv[i] } else { 0.0 }))
}

/// Fine-level smoother.
#[derive(Clone)]
pub enum Smoother {
    Jacobi,
    /// Alternates Jacobi and neural steps with the hybrid parity.
    Hybrid(Arc<dyn LinearOperator + Send + Sync>),
}

impl std::fmt::Debug for Smoother {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Smoother::Jacobi => write!(f, "Jacobi"),
            Smoother::Hybrid(b) => write!(f, "Hybrid(n = {})", b.dim()),
        }
    }
}

#[derive(Debug)]
struct Level {
    matrix: CsrMatrix,
    dinv: Vec<f64>,
    h: f64,
}

/// Levels fine to coarse with prolongations between neighbours and a
/// direct solve on the coarsest.
#[derive(Debug)]
pub struct MgHierarchy {
    levels: Vec<Level>,
    /// `prolongations[l]` maps level `l + 1` to level `l`.
    prolongations: Vec<CsrMatrix>,
    /// Restriction is `restriction_scale[l] * prolongations[l]ᵀ`.
    restriction_scale: Vec<f64>,
    coarse: SparseFactor,
    pub smoother: Smoother,
    pub omega: f64,
    pub nu_pre: usize,
    pub nu_post: usize,
}

impl MgHierarchy {
    /// Explicit construction; `matrices` are fine to coarse.
    pub fn from_parts(
        matrices: Vec<(CsrMatrix, f64)>,
        prolongations: Vec<CsrMatrix>,
        restriction_scale: Vec<f64>,
        smoother: Smoother,
    ) -> Result<Self> {
        if matrices.is_empty() || prolongations.len() != matrices.len() - 1 || restriction_scale.len() != prolongations.len() {
            return Err(Error::InvalidConfig("inconsistent multigrid hierarchy".into()));
        }
        for (l, p) in prolongations.iter().enumerate() {
            check_dim(matrices[l].0.nrows(), p.nrows())?;
            check_dim(matrices[l + 1].0.nrows(), p.ncols())?;
        }
        if let Smoother::Hybrid(b) = &smoother {
            check_dim(matrices[0].0.nrows(), b.dim())?;
        }
        let coarse = SparseFactor::new(&matrices.last().expect("non-empty").0)?;
        let levels = matrices
            .into_iter()
            .map(|(matrix, h)| Ok(Level { dinv: inverse_diagonal(&matrix)?, matrix, h }))
            .collect::<Result<Vec<_>>>()?;
        let nu = match smoother {
            Smoother::Jacobi => 3,
            Smoother::Hybrid(_) => 2,
        };
        Ok(Self { levels, prolongations, restriction_scale, coarse, smoother, omega: 0.5, nu_pre: nu, nu_post: nu })
    }

    /// Geometric hierarchy on the unit interval with re-assembled operators
    /// at each mesh size in `hs` (fine first) and linear interpolation.
    pub fn geometric_1d(problem: &EllipticProblem, hs: &[f64], smoother: Smoother) -> Result<Self> {
        if hs.is_empty() {
            return Err(Error::InvalidConfig("empty mesh list".into()));
        }
        let systems = hs.iter().map(|&h| assemble_1d(problem, h)).collect::<Result<Vec<_>>>()?;
        let mut prolongations = Vec::new();
        let mut scales = Vec::new();
        for w in systems.windows(2) {
            prolongations.push(linear_interpolation(w[0].h, w[1].h)?);
            // keeps R A_fine P consistent with the re-assembled coarse operator
            scales.push(w[0].green_weight / w[1].green_weight);
        }
        let matrices = systems.into_iter().map(|s| (s.matrix, s.h)).collect();
        Self::from_parts(matrices, prolongations, scales, smoother)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn fine_matrix(&self) -> &CsrMatrix {
        &self.levels[0].matrix
    }

    fn smooth(&self, level: usize, f: &[f64], u: &mut [f64], steps: usize) {
        let lv = &self.levels[level];
        let mut z = vec![0.0; u.len()];
        for k in 1..=steps {
            let r = residual(&lv.matrix, f, u);
            match (&self.smoother, level) {
                (Smoother::Hybrid(b), 0) if k % 2 == 0 => {
                    b.apply(&r, &mut z);
                    u.iter_mut().zip(&z).for_each(|(ui, zi)| *ui += zi);
                }
                _ => {
                    for i in 0..u.len() {
                        u[i] += self.omega * lv.dinv[i] * r[i];
                    }
                }
            }
        }
    }

    fn vcycle_at(&self, level: usize, f: &[f64], u: &mut [f64]) -> Result<()> {
        if level + 1 == self.levels.len() {
            let x = self.coarse.solve(f)?;
            u.copy_from_slice(&x);
            return Ok(());
        }
        self.smooth(level, f, u, self.nu_pre);
        let r = residual(&self.levels[level].matrix, f, u);
        let p = &self.prolongations[level];
        let rc: Vec<f64> = p.mul_vec_transpose(&r).iter().map(|v| v * self.restriction_scale[level]).collect();
        let mut ec = vec![0.0; rc.len()];
        self.vcycle_at(level + 1, &rc, &mut ec)?;
        let e = p.mul_vec(&ec);
        u.iter_mut().zip(e).for_each(|(ui, ei)| *ui += ei);
        self.smooth(level, f, u, self.nu_post);
        Ok(())
    }

    /// One V-cycle on the finest level; a single-level hierarchy is a
    /// direct solve.
    pub fn vcycle(&self, f: &[f64], u: &mut [f64]) -> Result<()> {
        check_dim(self.levels[0].matrix.nrows(), f.len())?;
        check_dim(f.len(), u.len())?;
        self.vcycle_at(0, f, u)
    }

    /// Plain-text sketch of the cycle.
    pub fn diagram(&self) -> String {
        let mut s = String::new();
        let smoother = match self.smoother {
            Smoother::Jacobi => "jacobi",
            Smoother::Hybrid(_) => "hybrid",
        };
        let last = self.levels.len() - 1;
        for (l, lv) in self.levels.iter().enumerate() {
            let pad = "  ".repeat(l);
            if l == last {
                let _ = writeln!(s, "{pad}[direct] n = {} h = {}", lv.matrix.nrows(), lv.h);
            } else {
                let kind = if l == 0 { smoother } else { "jacobi" };
                let _ = writeln!(s, "{pad}\\ pre {} x{} n = {} h = {}", kind, self.nu_pre, lv.matrix.nrows(), lv.h);
            }
        }
        for l in (0..last).rev() {
            let kind = if l == 0 { smoother } else { "jacobi" };
            let _ = writeln!(s, "{}/ post {} x{}", "  ".repeat(l), kind, self.nu_post);
        }
        s
    }
}

/// Repeated V-cycles from `U = 0`. `opts.maxiter` counts cycles.
pub fn run_multigrid(hier: &MgHierarchy, f: &[f64], opts: &SolveOptions) -> Result<(Vec<f64>, IterationTrace)> {
    let a = hier.fine_matrix();
    let n = a.nrows();
    check_dim(n, f.len())?;
    let fnorm = norm2(f);
    let mut u = vec![0.0; n];
    let mut trace = IterationTrace::default();
    let (r0, e0) = trace.log(0, a, f, &u, opts)?;
    if opts.done(r0, fnorm, e0) {
        trace.converged = true;
        return Ok((u, trace));
    }
    for c in 1..=opts.maxiter {
        hier.vcycle(f, &mut u)?;
        if let Smoother::Hybrid(_) = hier.smoother {
            trace.neural_applications += (hier.nu_pre + hier.nu_post) / 2;
        }
        let (r, e) = trace.log(c, a, f, &u, opts)?;
        trace.iterations = c;
        if opts.done(r, fnorm, e) {
            trace.converged = true;
            break;
        }
    }
    Ok((u, trace))
}
