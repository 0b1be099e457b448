//! Benchmark problems, exact kernels, manufactured solutions and their
//! discretizations.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    UnitInterval,
    UnitDisc,
}

impl Domain {
    pub fn dim(self) -> usize {
        match self {
            Domain::UnitInterval => 1,
            Domain::UnitDisc => 2,
        }
    }

    /// Distance from an interior point to the boundary.
    pub fn boundary_distance(self, x: &[f64]) -> f64 {
        match self {
            Domain::UnitInterval => x[0].min(1.0 - x[0]),
            Domain::UnitDisc => 1.0 - (x[0] * x[0] + x[1] * x[1]).sqrt(),
        }
    }

    pub fn contains(self, x: &[f64]) -> bool {
        match self {
            Domain::UnitInterval => (0.0..=1.0).contains(&x[0]),
            Domain::UnitDisc => x[0] * x[0] + x[1] * x[1] <= 1.0 + 1e-12,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::UnitInterval => "unit-interval",
            Domain::UnitDisc => "unit-disc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemId {
    Poisson1d,
    Helmholtz1d,
    PoissonDisc,
}

impl ProblemId {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemId::Poisson1d => "poisson1d",
            ProblemId::Helmholtz1d => "helmholtz1d",
            ProblemId::PoissonDisc => "poisson-disc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "poisson1d" => Ok(ProblemId::Poisson1d),
            "helmholtz1d" => Ok(ProblemId::Helmholtz1d),
            "poisson-disc" | "poisson2d" => Ok(ProblemId::PoissonDisc),
            _ => Err(Error::InvalidConfig(format!("unknown problem `{s}`"))),
        }
    }
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Writes the gradient of a coefficient into the output slice.
pub type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type KernelFn = fn(&[f64], &[f64]) -> f64;

/// `-div(c grad u) - k2 u = f` with homogeneous Dirichlet data.
#[derive(Clone)]
pub struct EllipticProblem {
    pub id: ProblemId,
    pub domain: Domain,
    pub c: ScalarFn,
    pub grad_c: GradFn,
    pub k2: ScalarFn,
    pub f: ScalarFn,
    pub exact_u: Option<ScalarFn>,
    pub exact_green: Option<KernelFn>,
}

impl std::fmt::Debug for EllipticProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EllipticProblem").field("id", &self.id).field("domain", &self.domain).finish_non_exhaustive()
    }
}

impl EllipticProblem {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn has_zeroth_order(&self) -> bool {
        self.id == ProblemId::Helmholtz1d
    }
}

pub fn exact_green_poisson1d(x: f64, y: f64) -> f64 {
    if x <= y {
        x * (1.0 - y)
    } else {
        y * (1.0 - x)
    }
}

/// Dirichlet Green's function of the unit disc; `x == y` is rejected.
pub fn exact_green_disc2d(x: &[f64], y: &[f64]) -> Result<f64> {
    let d2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
    if d2 == 0.0 {
        return Err(Error::SingularPoint);
    }
    let m = (x[0] * y[1] - x[1] * y[0]).powi(2) + (x[0] * y[0] + x[1] * y[1] - 1.0).powi(2);
    Ok(-(d2 / m).ln() / (4.0 * PI))
}

fn green1d_kernel(x: &[f64], y: &[f64]) -> f64 {
    exact_green_poisson1d(x[0], y[0])
}

fn green_disc_kernel(x: &[f64], y: &[f64]) -> f64 {
    exact_green_disc2d(x, y).unwrap_or(f64::INFINITY)
}

fn manufactured_u1d(x: f64) -> f64 {
    10.0 * x - 10.0 * x * x + 0.5 * (20.0 * PI * x.powi(3)).sin()
}

fn manufactured_du1d(x: f64) -> f64 {
    10.0 - 20.0 * x + 30.0 * PI * x * x * (20.0 * PI * x.powi(3)).cos()
}

fn manufactured_d2u1d(x: f64) -> f64 {
    let a = 20.0 * PI * x.powi(3);
    -20.0 + 60.0 * PI * x * a.cos() - 1800.0 * PI * PI * x.powi(4) * a.sin()
}

fn helmholtz_c(x: f64) -> f64 {
    (x - 2.0).powi(2)
}

fn helmholtz_k2(x: f64) -> f64 {
    (15.0 * (10.0 * x).sin()).powi(2)
}

/// The three shipped problems with their manufactured forcing.
pub fn problem(id: ProblemId) -> EllipticProblem {
    match id {
        ProblemId::Poisson1d => EllipticProblem {
            id,
            domain: Domain::UnitInterval,
            c: Arc::new(|_| 1.0),
            grad_c: Arc::new(|_, g| g[0] = 0.0),
            k2: Arc::new(|_| 0.0),
            f: Arc::new(|x| -manufactured_d2u1d(x[0])),
            exact_u: Some(Arc::new(|x| manufactured_u1d(x[0]))),
            exact_green: Some(green1d_kernel),
        },
        ProblemId::Helmholtz1d => EllipticProblem {
            id,
            domain: Domain::UnitInterval,
            c: Arc::new(|x| helmholtz_c(x[0])),
            grad_c: Arc::new(|x, g| g[0] = 2.0 * (x[0] - 2.0)),
            k2: Arc::new(|x| helmholtz_k2(x[0])),
            f: Arc::new(|x| {
                let x = x[0];
                -helmholtz_c(x) * manufactured_d2u1d(x) - 2.0 * (x - 2.0) * manufactured_du1d(x)
                    - helmholtz_k2(x) * manufactured_u1d(x)
            }),
            exact_u: Some(Arc::new(|x| manufactured_u1d(x[0]))),
            exact_green: None,
        },
        ProblemId::PoissonDisc => EllipticProblem {
            id,
            domain: Domain::UnitDisc,
            c: Arc::new(|_| 1.0),
            grad_c: Arc::new(|_, g| {
                g[0] = 0.0;
                g[1] = 0.0;
            }),
            k2: Arc::new(|_| 0.0),
            f: Arc::new(|x| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                (4.0 * r2 + 4.0) * (r2 - 1.0).exp()
            }),
            exact_u: Some(Arc::new(|x| 1.0 - (x[0] * x[0] + x[1] * x[1] - 1.0).exp())),
            exact_green: Some(green_disc_kernel),
        },
    }
}

/// Looks a problem up by name (`poisson1d`, `helmholtz1d`, `poisson-disc`).
pub fn manufactured_case(name: &str) -> Result<EllipticProblem> {
    Ok(problem(ProblemId::parse(name)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Definiteness {
    PositiveDefinite,
    Indefinite,
}

/// Linear system `A U = F` on the interior nodes.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    /// Interior nodes, `dim` coordinates each.
    pub nodes: Vec<f64>,
    pub dim: usize,
    pub h: f64,
    pub symmetric: bool,
    pub definiteness: Definiteness,
    /// `w` with `A⁻¹ ≈ w G(x_i, x_j)`: 1 for the Galerkin systems, `h` for
    /// finite differences.
    pub green_weight: f64,
}

impl DiscreteSystem {
    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact solution sampled at the nodes.
    pub fn sample(&self, u: &ScalarFn) -> Vec<f64> {
        (0..self.len()).map(|i| u(self.node(i))).collect()
    }
}

fn interior_count(h: f64) -> Result<usize> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::InvalidConfig(format!("mesh size {h} outside (0, 1)")));
    }
    let n = (1.0 / h).round() as usize;
    if n < 2 || ((n as f64) * h - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("1/h must be an integer ≥ 2, got h = {h}")));
    }
    Ok(n - 1)
}

const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

fn tridiag(n: usize, diag: impl Fn(usize) -> f64, off: impl Fn(usize) -> f64) -> CsrMatrix {
    let mut t = Vec::with_capacity(3 * n);
    for i in 0..n {
        if i > 0 {
            t.push((i, i - 1, off(i - 1)));
        }
        t.push((i, i, diag(i)));
        if i + 1 < n {
            t.push((i, i + 1, off(i)));
        }
    }
    CsrMatrix::from_triplets(n, n, &t)
}

/// Linear finite elements for `-u'' = f` on (0, 1).
pub fn assemble_poisson1d_fem(h: f64, f: &ScalarFn) -> Result<DiscreteSystem> {
    let n = interior_count(h)?;
    let matrix = tridiag(n, |_| 2.0 / h, |_| -1.0 / h);
    let mut rhs = vec![0.0; n];
    // element e spans [e h, (e+1) h]; its left node is interior index e-1
    for e in 0..=n {
        let (a, b) = (e as f64 * h, (e + 1) as f64 * h);
        for &(xi, w) in &GAUSS3 {
            let x = 0.5 * (a + b) + 0.5 * h * xi;
            let fx = f(&[x]) * w * 0.5 * h;
            let right = (x - a) / h;
            if e >= 1 {
                rhs[e - 1] += fx * (1.0 - right);
            }
            if e < n {
                rhs[e] += fx * right;
            }
        }
    }
    let nodes = (1..=n).map(|i| i as f64 * h).collect();
    Ok(DiscreteSystem { matrix, rhs, nodes, dim: 1, h, symmetric: true, definiteness: Definiteness::PositiveDefinite, green_weight: 1.0 })
}

/// Conservative central differences for `-(c u')' - k2 u = f`, with `c`
/// sampled at cell midpoints.
pub fn assemble_helmholtz1d_fd(h: f64, c: &ScalarFn, k2: &ScalarFn, f: &ScalarFn) -> Result<DiscreteSystem> {
    let n = interior_count(h)?;
    let x = |i: usize| (i + 1) as f64 * h;
    let cm = |i: usize| c(&[x(i) - 0.5 * h]);
    let cp = |i: usize| c(&[x(i) + 0.5 * h]);
    let h2 = h * h;
    let matrix = tridiag(n, |i| (cm(i) + cp(i)) / h2 - k2(&[x(i)]), |i| -cp(i) / h2);
    let rhs = (0..n).map(|i| f(&[x(i)])).collect();
    let nodes: Vec<f64> = (0..n).map(x).collect();
    let mut definiteness = Definiteness::PositiveDefinite;
    if nodes.iter().any(|&xi| k2(&[xi]) != 0.0) {
        definiteness = Definiteness::Indefinite;
    }
    Ok(DiscreteSystem { matrix, rhs, nodes, dim: 1, h, symmetric: true, definiteness, green_weight: h })
}

/// The discretization used throughout for a 1D problem: FEM for Poisson,
/// finite differences for Helmholtz.
pub fn assemble_1d(p: &EllipticProblem, h: f64) -> Result<DiscreteSystem> {
    match p.id {
        ProblemId::Poisson1d => assemble_poisson1d_fem(h, &p.f),
        ProblemId::Helmholtz1d => assemble_helmholtz1d_fd(h, &p.c, &p.k2, &p.f),
        ProblemId::PoissonDisc => Err(Error::InvalidConfig("not a 1D problem".into())),
    }
}

/// Conforming triangulation of the unit disc.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscMesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary: Vec<bool>,
    pub h_target: f64,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Concentric rings `r_i = i/N` with `6i` equally spaced vertices each,
/// zipped together by angle. `N` is the smallest ring count whose longest
/// edge is at most `1.2 * h_target`.
pub fn mesh_unit_disc(h_target: f64) -> Result<DiscMesh> {
    if !(h_target > 0.0) {
        return Err(Error::InvalidConfig(format!("mesh size must be positive, got {h_target}")));
    }
    let mut rings = (1.0 / h_target).ceil() as usize;
    loop {
        let m = ring_mesh(rings, h_target)?;
        if m.max_edge() <= 1.2 * h_target {
            return Ok(m);
        }
        rings += 1;
    }
}

fn ring_mesh(rings: usize, h_target: f64) -> Result<DiscMesh> {
    let nverts = 1 + 3 * rings * (rings + 1);
    if nverts > 2_000_000 {
        return Err(Error::InvalidConfig(format!("mesh size {h_target} needs {nverts} vertices")));
    }
    let mut vertices = Vec::with_capacity(nverts);
    let mut boundary = Vec::with_capacity(nverts);
    let mut ring_start = Vec::with_capacity(rings + 1);
    vertices.push([0.0, 0.0]);
    boundary.push(false);
    ring_start.push(0);
    for i in 1..=rings {
        ring_start.push(vertices.len());
        let r = i as f64 / rings as f64;
        let m = 6 * i;
        for j in 0..m {
            let t = 2.0 * PI * j as f64 / m as f64;
            let p = if i == rings { [t.cos(), t.sin()] } else { [r * t.cos(), r * t.sin()] };
            vertices.push(p);
            boundary.push(i == rings);
        }
    }
    let mut triangles = Vec::with_capacity(6 * rings * rings);
    for i in 1..=rings {
        let (n_in, n_out) = (if i == 1 { 1 } else { 6 * (i - 1) }, 6 * i);
        let (s_in, s_out) = (ring_start[i - 1], ring_start[i]);
        let inner = |p: usize| s_in + p % n_in;
        let outer = |q: usize| s_out + q % n_out;
        if i == 1 {
            for q in 0..n_out {
                triangles.push([inner(0), outer(q), outer(q + 1)]);
            }
            continue;
        }
        let (mut p, mut q) = (0, 0);
        while p < n_in || q < n_out {
            // close the gap with the shorter of the two candidate diagonals
            let d_out = dist2(vertices[inner(p)], vertices[outer(q + 1)]);
            let d_in = dist2(vertices[inner(p + 1)], vertices[outer(q)]);
            if q < n_out && (p == n_in || d_out <= d_in) {
                triangles.push([inner(p), outer(q), outer(q + 1)]);
                q += 1;
            } else {
                triangles.push([inner(p), outer(q), inner(p + 1)]);
                p += 1;
            }
        }
    }
    Ok(DiscMesh { vertices, triangles, boundary, h_target })
}

impl DiscMesh {
    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    pub fn max_edge(&self) -> f64 {
        let mut m: f64 = 0.0;
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (self.vertices[tri[k]], self.vertices[tri[(k + 1) % 3]]);
                m = m.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        m
    }

    /// Map from vertex index to interior unknown index.
    pub fn interior_index(&self) -> (Vec<Option<usize>>, usize) {
        let mut map = vec![None; self.vertices.len()];
        let mut n = 0;
        for (v, &b) in self.boundary.iter().enumerate() {
            if !b {
                map[v] = Some(n);
                n += 1;
            }
        }
        (map, n)
    }

    /// Vertex list then triangle list, one per line.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "vertices {}", self.vertices.len())?;
        for v in &self.vertices {
            writeln!(w, "{:.16e} {:.16e}", v[0], v[1])?;
        }
        writeln!(w, "triangles {}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

/// Barycentric coordinates of the 3-point interior rule (weights 1/3).
pub const TRI_QUAD3: [[f64; 3]; 3] = [[2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0]];

fn p1_gradients(p: [[f64; 2]; 3]) -> ([[f64; 2]; 3], f64) {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let g = [
        [(p[1][1] - p[2][1]) / det, (p[2][0] - p[1][0]) / det],
        [(p[2][1] - p[0][1]) / det, (p[0][0] - p[2][0]) / det],
        [(p[0][1] - p[1][1]) / det, (p[1][0] - p[0][0]) / det],
    ];
    (g, 0.5 * det)
}

/// Full stiffness matrix and load vector over all vertices, before
/// boundary elimination.
pub fn assemble_p1_full(mesh: &DiscMesh, f: &ScalarFn) -> (CsrMatrix, Vec<f64>) {
    let nv = mesh.vertices.len();
    let mut t = Vec::with_capacity(9 * mesh.triangles.len());
    let mut load = vec![0.0; nv];
    for tri in &mesh.triangles {
        let p = tri.map(|i| mesh.vertices[i]);
        let (g, area) = p1_gradients(p);
        for a in 0..3 {
            for b in 0..3 {
                t.push((tri[a], tri[b], area * (g[a][0] * g[b][0] + g[a][1] * g[b][1])));
            }
        }
        for bc in &TRI_QUAD3 {
            let x = [
                bc[0] * p[0][0] + bc[1] * p[1][0] + bc[2] * p[2][0],
                bc[0] * p[0][1] + bc[1] * p[1][1] + bc[2] * p[2][1],
            ];
            let fx = f(&x) * area / 3.0;
            for a in 0..3 {
                load[tri[a]] += fx * bc[a];
            }
        }
    }
    (CsrMatrix::from_triplets(nv, nv, &t), load)
}

/// Linear elements for `-Δu = f` with boundary rows and columns removed.
pub fn assemble_poisson2d_fem(mesh: &DiscMesh, f: &ScalarFn) -> Result<DiscreteSystem> {
    let (full, load) = assemble_p1_full(mesh, f);
    let (map, n) = mesh.interior_index();
    let mut t = Vec::with_capacity(full.nnz());
    let mut rhs = vec![0.0; n];
    let mut nodes = Vec::with_capacity(2 * n);
    for v in 0..mesh.vertices.len() {
        let Some(i) = map[v] else { continue };
        rhs[i] = load[v];
        nodes.extend_from_slice(&mesh.vertices[v]);
        let (cols, vals) = full.row(v);
        for (&c, &val) in cols.iter().zip(vals) {
            if let Some(j) = map[c] {
                t.push((i, j, val));
            }
        }
    }
    Ok(DiscreteSystem {
        matrix: CsrMatrix::from_triplets(n, n, &t),
        rhs,
        nodes,
        dim: 2,
        h: mesh.h_target,
        symmetric: true,
        definiteness: Definiteness::PositiveDefinite,
        green_weight: 1.0,
    })
}

/// Assembles the system used for any problem at mesh parameter `h`.
pub fn assemble(p: &EllipticProblem, h: f64) -> Result<DiscreteSystem> {
    match p.domain {
        Domain::UnitInterval => assemble_1d(p, h),
        Domain::UnitDisc => assemble_poisson2d_fem(&mesh_unit_disc(h)?, &p.f),
    }
}
