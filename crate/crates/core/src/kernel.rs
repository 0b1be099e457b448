//! Symmetric kernels, diagonal handling, kernel matrices and the quadrature
//! fast solver.

use std::f64::consts::PI;

use faer::Mat;

use crate::error::{check_dim, non_finite, Error, Result};
use crate::problems::{exact_green_disc2d, exact_green_poisson1d, DiscMesh, Domain, ScalarFn, TRI_QUAD3};

/// How `G(x, x)` is obtained when the kernel is singular on the diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagonalPolicy {
    /// Radius of the averaging circle.
    pub r_avg: f64,
    /// Number of equally spaced angles.
    pub k_avg: usize,
    /// Point pairs closer than this are treated as coincident.
    pub r_excl: f64,
}

impl DiagonalPolicy {
    /// `r_avg = h / 2`, 16 angles.
    pub fn for_mesh(h: f64) -> Self {
        Self { r_avg: 0.5 * h, k_avg: 16, r_excl: 1e-12 }
    }

    /// Policy for a kernel matrix standing in for the inverse of a nodal P1
    /// stiffness matrix: the nodal inverse behaves like the logarithmic
    /// kernel averaged at about `0.15 h` on the disc meshes, and `h / 2`
    /// leaves the diagonal short by `ln(10/3) / 2π`, enough to make the
    /// kernel matrix indefinite.
    pub fn for_nodal_inverse(h: f64) -> Self {
        Self { r_avg: NODAL_RADIUS * h, ..Self::for_mesh(h) }
    }
}

/// Ratio of the equivalent averaging radius to the mesh size, measured from
/// diagonals of the inverse P1 stiffness matrices (0.136 to 0.17 over the
/// nodes of the h = 0.1 and h = 0.05 disc meshes).
pub const NODAL_RADIUS: f64 = 0.15;

/// A symmetric kernel `G(x, y)` on a domain in `R^d`.
pub trait Kernel: Sync {
    fn dim(&self) -> usize;

    fn domain(&self) -> Domain;

    /// Off-diagonal value. Must be symmetric in its arguments.
    fn eval(&self, x: &[f64], y: &[f64]) -> f64;

    /// Values for the pairs `(xs[i], ys[i])`, flat `d`-strided slices.
    fn eval_batch(&self, xs: &[f64], ys: &[f64]) -> Vec<f64> {
        let d = self.dim();
        xs.chunks(d).zip(ys.chunks(d)).map(|(x, y)| self.eval(x, y)).collect()
    }

    /// True if `eval(x, x)` is finite and is the diagonal value.
    fn continuous_diagonal(&self) -> bool;
}

/// Closed-form Green's functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExactKernel {
    Poisson1d,
    Disc2d,
}

impl Kernel for ExactKernel {
    fn dim(&self) -> usize {
        match self {
            ExactKernel::Poisson1d => 1,
            ExactKernel::Disc2d => 2,
        }
    }

    fn domain(&self) -> Domain {
        match self {
            ExactKernel::Poisson1d => Domain::UnitInterval,
            ExactKernel::Disc2d => Domain::UnitDisc,
        }
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            ExactKernel::Poisson1d => exact_green_poisson1d(x[0], y[0]),
            ExactKernel::Disc2d => exact_green_disc2d(x, y).unwrap_or(f64::INFINITY),
        }
    }

    fn continuous_diagonal(&self) -> bool {
        matches!(self, ExactKernel::Poisson1d)
    }
}

/// A kernel that is identically one, for separability checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantKernel {
    pub d: usize,
    pub domain: Domain,
    pub value: f64,
}

impl Kernel for ConstantKernel {
    fn dim(&self) -> usize {
        self.d
    }
    fn domain(&self) -> Domain {
        self.domain
    }
    fn eval(&self, _: &[f64], _: &[f64]) -> f64 {
        self.value
    }
    fn continuous_diagonal(&self) -> bool {
        true
    }
}

/// Diagonal value and whether any averaging point fell outside the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagonalValue {
    pub value: f64,
    pub clipped: bool,
}

/// `G(x, x)`: direct evaluation for continuous kernels, otherwise the mean
/// of `G(x, x + r_avg e_k)` over `k_avg` angles. Angles whose point leaves
/// the domain are dropped and flagged.
pub fn diagonal_value<K: Kernel + ?Sized>(kernel: &K, x: &[f64], policy: &DiagonalPolicy) -> Result<DiagonalValue> {
    check_dim(kernel.dim(), x.len())?;
    if kernel.continuous_diagonal() {
        return Ok(DiagonalValue { value: kernel.eval(x, x), clipped: false });
    }
    if kernel.dim() != 2 {
        return Err(Error::InvalidConfig("ball averaging is implemented for d = 2".into()));
    }
    if policy.k_avg == 0 || !(policy.r_avg > 0.0) {
        return Err(Error::InvalidConfig("diagonal policy needs k_avg > 0 and r_avg > 0".into()));
    }
    let mut xs = Vec::with_capacity(2 * policy.k_avg);
    let mut ys = Vec::with_capacity(2 * policy.k_avg);
    for k in 0..policy.k_avg {
        let t = 2.0 * PI * k as f64 / policy.k_avg as f64;
        let p = [x[0] + policy.r_avg * t.cos(), x[1] + policy.r_avg * t.sin()];
        if kernel.domain().contains(&p) {
            xs.extend_from_slice(x);
            ys.extend_from_slice(&p);
        }
    }
    let clipped = xs.len() < 2 * policy.k_avg;
    if xs.is_empty() {
        // every averaging point is outside: shrink onto the boundary distance
        let r = 0.5 * kernel.domain().boundary_distance(x);
        if !(r > 0.0) {
            return Ok(DiagonalValue { value: 0.0, clipped: true });
        }
        let p = [x[0] + r, x[1]];
        return Ok(DiagonalValue { value: kernel.eval(x, &p), clipped: true });
    }
    let vals = kernel.eval_batch(&xs, &ys);
    let value = vals.iter().sum::<f64>() / vals.len() as f64;
    if !value.is_finite() {
        return Err(non_finite(format!("diagonal value at {x:?}")));
    }
    Ok(DiagonalValue { value, clipped })
}

pub(crate) fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() <= tol * tol
}

/// Symmetric Gram matrix `G(x_i, x_j)` over flat `d`-strided points.
/// Returns the matrix and the number of clipped diagonal entries.
pub fn kernel_matrix<K: Kernel + ?Sized>(kernel: &K, points: &[f64], policy: &DiagonalPolicy) -> Result<(Mat<f64>, usize)> {
    let d = kernel.dim();
    if points.len() % d != 0 {
        return Err(Error::DimensionMismatch { expected: d, got: points.len() % d });
    }
    let n = points.len() / d;
    let mut m = Mat::<f64>::zeros(n, n);
    let mut clipped = 0;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut pairs = Vec::new();
    let flush = |xs: &mut Vec<f64>, ys: &mut Vec<f64>, pairs: &mut Vec<(usize, usize)>, m: &mut Mat<f64>| -> Result<()> {
        let vals = kernel.eval_batch(xs, ys);
        for (&(i, j), v) in pairs.iter().zip(vals) {
            if !v.is_finite() {
                return Err(non_finite(format!("kernel entry ({i}, {j})")));
            }
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        xs.clear();
        ys.clear();
        pairs.clear();
        Ok(())
    };
    const BLOCK: usize = 1 << 16;
    for i in 0..n {
        let xi = &points[i * d..(i + 1) * d];
        let dv = diagonal_value(kernel, xi, policy)?;
        clipped += usize::from(dv.clipped);
        m[(i, i)] = dv.value;
        for j in i + 1..n {
            let xj = &points[j * d..(j + 1) * d];
            if close(xi, xj, policy.r_excl) {
                let v = diagonal_value(kernel, xi, policy)?.value;
                m[(i, j)] = v;
                m[(j, i)] = v;
                continue;
            }
            xs.extend_from_slice(xi);
            ys.extend_from_slice(xj);
            pairs.push((i, j));
        }
        if pairs.len() >= BLOCK {
            flush(&mut xs, &mut ys, &mut pairs, &mut m)?;
        }
    }
    flush(&mut xs, &mut ys, &mut pairs, &mut m)?;
    Ok((m, clipped))
}

/// Rectangular matrix `G(x_i, y_j)`; coincident pairs use the diagonal value.
pub fn cross_matrix<K: Kernel + ?Sized>(kernel: &K, xs: &[f64], ys: &[f64], policy: &DiagonalPolicy) -> Result<Mat<f64>> {
    let d = kernel.dim();
    let (nx, ny) = (xs.len() / d, ys.len() / d);
    let mut m = Mat::<f64>::zeros(nx, ny);
    let mut bx = Vec::with_capacity(ny * d);
    let mut by = Vec::with_capacity(ny * d);
    for i in 0..nx {
        let xi = &xs[i * d..(i + 1) * d];
        bx.clear();
        by.clear();
        let mut idx = Vec::with_capacity(ny);
        for j in 0..ny {
            let yj = &ys[j * d..(j + 1) * d];
            if close(xi, yj, policy.r_excl) {
                m[(i, j)] = diagonal_value(kernel, xi, policy)?.value;
            } else {
                bx.extend_from_slice(xi);
                by.extend_from_slice(yj);
                idx.push(j);
            }
        }
        for (j, v) in idx.into_iter().zip(kernel.eval_batch(&bx, &by)) {
            if !v.is_finite() {
                return Err(non_finite(format!("kernel entry ({i}, {j})")));
            }
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// A quadrature rule on the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub d: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gauss-Legendre nodes and weights on [-1, 1] for 1 to 4 points.
pub fn gauss_legendre(n: usize) -> Result<&'static [(f64, f64)]> {
    const G1: [(f64, f64); 1] = [(0.0, 2.0)];
    const G2: [(f64, f64); 2] = [(-0.577_350_269_189_625_8, 1.0), (0.577_350_269_189_625_8, 1.0)];
    const G3: [(f64, f64); 3] = [(-0.774_596_669_241_483_4, 5.0 / 9.0), (0.0, 8.0 / 9.0), (0.774_596_669_241_483_4, 5.0 / 9.0)];
    const G4: [(f64, f64); 4] = [
        (-0.861_136_311_594_052_6, 0.347_854_845_137_453_85),
        (-0.339_981_043_584_856_26, 0.652_145_154_862_546_1),
        (0.339_981_043_584_856_26, 0.652_145_154_862_546_1),
        (0.861_136_311_594_052_6, 0.347_854_845_137_453_85),
    ];
    match n {
        1 => Ok(&G1),
        2 => Ok(&G2),
        3 => Ok(&G3),
        4 => Ok(&G4),
        _ => Err(Error::InvalidConfig(format!("no {n}-point Gauss rule"))),
    }
}

impl Quadrature {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, q: usize) -> &[f64] {
        &self.points[q * self.d..(q + 1) * self.d]
    }

    /// Midpoint rule on `cells` equal cells of [0, 1].
    pub fn midpoint_1d(cells: usize) -> Self {
        let h = 1.0 / cells as f64;
        Self { d: 1, points: (0..cells).map(|i| (i as f64 + 0.5) * h).collect(), weights: vec![h; cells] }
    }

    /// `order`-point Gauss rule on each of `cells` equal cells of [0, 1].
    pub fn gauss_1d(cells: usize, order: usize) -> Result<Self> {
        let rule = gauss_legendre(order)?;
        let h = 1.0 / cells as f64;
        let mut points = Vec::with_capacity(cells * order);
        let mut weights = Vec::with_capacity(cells * order);
        for c in 0..cells {
            let mid = (c as f64 + 0.5) * h;
            for &(t, w) in rule {
                points.push(mid + 0.5 * h * t);
                weights.push(0.5 * h * w);
            }
        }
        Ok(Self { d: 1, points, weights })
    }

    /// Three-point barycentric rule on every triangle of the mesh.
    pub fn triangles(mesh: &DiscMesh) -> Self {
        let mut points = Vec::with_capacity(mesh.triangles.len() * 6);
        let mut weights = Vec::with_capacity(mesh.triangles.len() * 3);
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let area = mesh.area(t);
            for bc in &TRI_QUAD3 {
                for c in 0..2 {
                    points.push((0..3).map(|a| bc[a] * mesh.vertices[tri[a]][c]).sum());
                }
                weights.push(area / 3.0);
            }
        }
        Self { d: 2, points, weights }
    }
}

/// `u(x) = Σ_q w_q f(y_q) G(x, y_q)` at every evaluation point.
pub fn reconstruct_solution<K: Kernel + ?Sized>(
    kernel: &K,
    f: &ScalarFn,
    eval_points: &[f64],
    quad: &Quadrature,
    policy: &DiagonalPolicy,
) -> Result<Vec<f64>> {
    check_dim(kernel.dim(), quad.d)?;
    let wf: Vec<f64> = (0..quad.len()).map(|q| quad.weights[q] * f(quad.point(q))).collect();
    if wf.iter().all(|v| *v == 0.0) {
        return Ok(vec![0.0; eval_points.len() / quad.d]);
    }
    let d = quad.d;
    let n = eval_points.len() / d;
    let mut out = Vec::with_capacity(n);
    // row blocks keep the kernel matrix small
    let rows = (1 << 20) / quad.len().max(1) + 1;
    for start in (0..n).step_by(rows) {
        let end = (start + rows).min(n);
        let m = cross_matrix(kernel, &eval_points[start * d..end * d], &quad.points, policy)?;
        for i in 0..end - start {
            out.push((0..quad.len()).map(|q| m[(i, q)] * wf[q]).sum());
        }
    }
    Ok(out)
}
