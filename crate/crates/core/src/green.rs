//! Augmented variables, collocation data, the four loss terms, training and
//! the trained surrogate.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{check_dim, non_finite, Error, Result};
use crate::kernel::Kernel;
use crate::net::{adamw_step, eval_jets, jet_components, loss_param_grad, AdamWConfig, AdamWState, JetBatch, JetQuery, MlpNetwork};
use crate::problems::{Domain, EllipticProblem, ProblemId};

/// Known singular behaviour fed to the network as the extra input `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentedKind {
    /// `|x - y|`, d = 1.
    Abs,
    /// `ln |x - y|`, d = 2.
    Log,
    /// `|x - y|^p`.
    Power(f64),
}

impl AugmentedKind {
    pub fn default_for(d: usize) -> Self {
        match d {
            1 => AugmentedKind::Abs,
            2 => AugmentedKind::Log,
            _ => AugmentedKind::Power(2.0 - d as f64),
        }
    }

    pub fn validate(self, d: usize) -> Result<()> {
        let ok = match self {
            AugmentedKind::Abs => d == 1,
            AugmentedKind::Log => d == 2,
            AugmentedKind::Power(p) => p.is_finite() && (p < 0.0 || p == 2.0 - d as f64),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("augmented variable {self} is not valid in dimension {d}")))
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "abs" => return Ok(AugmentedKind::Abs),
            "log" => return Ok(AugmentedKind::Log),
            _ => {}
        }
        s.strip_prefix("power(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|p| p.trim().parse::<f64>().ok())
            .map(AugmentedKind::Power)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown augmented variable `{s}`")))
    }

    /// Whether `Δφ` can be nonzero, which needs an extra `∂_z` seed.
    fn has_laplacian(self, d: usize) -> bool {
        matches!(self, AugmentedKind::Power(p) if p != 2.0 - d as f64)
    }
}

impl fmt::Display for AugmentedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentedKind::Abs => write!(f, "abs"),
            AugmentedKind::Log => write!(f, "log"),
            AugmentedKind::Power(p) => write!(f, "power({p})"),
        }
    }
}

impl Serialize for AugmentedKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AugmentedKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AugmentedKind::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// `φ`, `∇_x φ`, `|∇φ|²` and `Δ_x φ` at one point pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmented {
    pub phi: f64,
    pub grad: [f64; 3],
    pub grad_norm2: f64,
    pub lap: f64,
}

pub fn augmented_variable(kind: AugmentedKind, x: &[f64], y: &[f64]) -> Result<Augmented> {
    check_dim(x.len(), y.len())?;
    let d = x.len();
    if d > 3 {
        return Err(Error::InvalidConfig(format!("dimension {d} not supported")));
    }
    let mut diff = [0.0; 3];
    for i in 0..d {
        diff[i] = x[i] - y[i];
    }
    let r2: f64 = diff.iter().map(|v| v * v).sum();
    if r2 == 0.0 {
        return Err(Error::SingularPoint);
    }
    let r = r2.sqrt();
    Ok(match kind {
        AugmentedKind::Abs => Augmented { phi: r, grad: [diff[0].signum(), 0.0, 0.0], grad_norm2: 1.0, lap: 0.0 },
        AugmentedKind::Log => {
            Augmented { phi: 0.5 * r2.ln(), grad: diff.map(|v| v / r2), grad_norm2: 1.0 / r2, lap: 0.0 }
        }
        AugmentedKind::Power(p) => {
            let rp2 = r.powf(p - 2.0);
            Augmented {
                phi: r.powf(p),
                grad: diff.map(|v| p * rp2 * v),
                grad_norm2: p * p * rp2 * rp2 * r2,
                lap: p * (p + d as f64 - 2.0) * rp2,
            }
        }
    })
}

/// `φ(x, y)` only. Symmetric in its arguments bit for bit.
fn phi_value(kind: AugmentedKind, x: &[f64], y: &[f64]) -> f64 {
    let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    match kind {
        AugmentedKind::Abs => r2.sqrt(),
        AugmentedKind::Log => 0.5 * r2.ln(),
        AugmentedKind::Power(p) => r2.sqrt().powf(p),
    }
}

/// Training hyperparameters plus the problem and augmented variable.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub problem: ProblemId,
    pub kind: AugmentedKind,
    pub depth: usize,
    pub width: usize,
    pub beta_snglr: f64,
    pub beta_bndry: f64,
    pub beta_symtr: f64,
    pub n_r: usize,
    pub n_s: usize,
    pub n_b: usize,
    pub m: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub epochs: usize,
    pub seed: u64,
    /// Normalization circle radii (d = 2 only).
    pub eps: Vec<f64>,
    pub r_excl: f64,
    /// Sources per optimizer step; `m` means full batch.
    pub batch_sources: usize,
    pub weight_decay: f64,
    /// Draw a fresh collocation set every this many epochs (0 = never).
    pub resample_every: usize,
    pub log_every: usize,
}

impl TrainConfig {
    /// Hyperparameters of the reference runs for each problem.
    pub fn reference(problem: ProblemId) -> Self {
        let base = TrainConfig {
            problem,
            kind: AugmentedKind::Abs,
            depth: 2,
            width: 40,
            beta_snglr: 400.0,
            beta_bndry: 400.0,
            beta_symtr: 400.0,
            n_r: 160,
            n_s: 500,
            n_b: 2,
            m: 500,
            lr: 1e-3,
            milestones: vec![12_000, 22_000],
            epochs: 30_000,
            seed: 1,
            eps: Vec::new(),
            r_excl: 1e-3,
            batch_sources: 500,
            weight_decay: 1e-2,
            resample_every: 0,
            log_every: 100,
        };
        match problem {
            ProblemId::Poisson1d => base,
            ProblemId::Helmholtz1d => TrainConfig { n_r: 500, milestones: vec![8_000, 15_000], epochs: 20_000, ..base },
            ProblemId::PoissonDisc => TrainConfig {
                kind: AugmentedKind::Log,
                depth: 6,
                n_r: 640,
                n_s: 200,
                n_b: 640,
                m: 160,
                batch_sources: 160,
                milestones: vec![15_000, 25_000],
                epochs: 30_000,
                eps: vec![0.1, 0.08, 0.064, 0.005],
                r_excl: 5e-3,
                ..base
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self.problem {
            ProblemId::PoissonDisc => 2,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        self.kind.validate(d)?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.depth == 0 || self.width == 0 {
            return bad("depth and width must be positive");
        }
        if self.n_r == 0 || self.n_s == 0 || self.n_b == 0 || self.m == 0 {
            return bad("collocation sizes must be positive");
        }
        if [self.beta_snglr, self.beta_bndry, self.beta_symtr].iter().any(|b| !(*b >= 0.0)) {
            return bad("penalty coefficients must be nonnegative");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing");
        }
        if !(self.lr > 0.0) || !(self.r_excl > 0.0) {
            return bad("lr and r_excl must be positive");
        }
        if d == 1 && self.n_s != self.m {
            return bad("in 1D the singular set is the source set, so n_s must equal m");
        }
        if d == 1 && self.n_b != 2 {
            return bad("in 1D the boundary set is the two endpoints, so n_b must be 2");
        }
        if d == 2 && (self.eps.is_empty() || self.eps.iter().any(|e| !(*e > 0.0 && *e < 1.0))) {
            return bad("d = 2 needs normalization radii in (0, 1)");
        }
        if d == 2 && self.n_s < self.eps.len() {
            return bad("n_s must be at least the number of normalization radii");
        }
        Ok(())
    }

    /// Reads a config file; missing keys fall back to the reference values
    /// of the named problem except for the keys listed as required.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let problem = ProblemId::parse(cfg.require("problem", "name")?)?;
        let mut c = TrainConfig::reference(problem);
        if let Some(k) = cfg.get("problem", "kind") {
            c.kind = AugmentedKind::parse(k)?;
        }
        c.depth = cfg.require_parse("network", "depth")?;
        c.width = cfg.require_parse("network", "width")?;
        c.beta_snglr = cfg.parse_or("loss", "beta_snglr", c.beta_snglr)?;
        c.beta_bndry = cfg.parse_or("loss", "beta_bndry", c.beta_bndry)?;
        c.beta_symtr = cfg.parse_or("loss", "beta_symtr", c.beta_symtr)?;
        c.n_r = cfg.require_parse("data", "n_r")?;
        c.n_s = cfg.require_parse("data", "n_s")?;
        c.n_b = cfg.require_parse("data", "n_b")?;
        c.m = cfg.require_parse("data", "m")?;
        if let Some(v) = cfg.get("data", "eps") {
            c.eps = Config::parse_list(v)?;
        }
        c.r_excl = cfg.parse_or("data", "r_excl", c.r_excl)?;
        c.resample_every = cfg.parse_or("data", "resample_every", c.resample_every)?;
        c.lr = cfg.require_parse("optim", "lr")?;
        c.milestones = match cfg.get("optim", "milestones") {
            Some(v) => Config::parse_list(v)?,
            None => Vec::new(),
        };
        c.epochs = cfg.require_parse("optim", "epochs")?;
        c.batch_sources = cfg.parse_or("optim", "batch_sources", c.m)?;
        c.weight_decay = cfg.parse_or("optim", "weight_decay", c.weight_decay)?;
        c.seed = cfg.parse_or("optim", "seed", c.seed)?;
        c.log_every = cfg.parse_or("optim", "log_every", c.log_every)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_config_string(&self) -> String {
        let list = |v: &[String]| v.join(", ");
        format!(
            "[problem]\nname = {}\nkind = {}\n\n[network]\ndepth = {}\nwidth = {}\n\n[loss]\nbeta_snglr = {}\nbeta_bndry = {}\nbeta_symtr = {}\n\n[data]\nn_r = {}\nn_s = {}\nn_b = {}\nm = {}\neps = {}\nr_excl = {}\nresample_every = {}\n\n[optim]\nlr = {}\nmilestones = {}\nepochs = {}\nbatch_sources = {}\nweight_decay = {}\nseed = {}\nlog_every = {}\n",
            self.problem.as_str(),
            self.kind,
            self.depth,
            self.width,
            self.beta_snglr,
            self.beta_bndry,
            self.beta_symtr,
            self.n_r,
            self.n_s,
            self.n_b,
            self.m,
            list(&self.eps.iter().map(|e| e.to_string()).collect::<Vec<_>>()),
            self.r_excl,
            self.resample_every,
            self.lr,
            list(&self.milestones.iter().map(|e| e.to_string()).collect::<Vec<_>>()),
            self.epochs,
            self.batch_sources,
            self.weight_decay,
            self.seed,
            self.log_every,
        )
    }
}

/// Points on one normalization circle around a source.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularCircle {
    pub radius: f64,
    pub points: Vec<f64>,
}

/// Collocation data; every point set is stored flat, grouped by source.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationBatch {
    pub d: usize,
    pub kind: AugmentedKind,
    pub n_r: usize,
    pub n_b: usize,
    pub sources: Vec<f64>,
    pub regular: Vec<f64>,
    pub regular_aug: Vec<Augmented>,
    pub boundary: Vec<f64>,
    /// d = 2: circles kept for each source; empty in 1D, where the singular
    /// set is the sources themselves.
    pub circles: Vec<Vec<SingularCircle>>,
}

impl CollocationBatch {
    pub fn num_sources(&self) -> usize {
        self.sources.len() / self.d
    }

    pub fn source(&self, m: usize) -> &[f64] {
        &self.sources[m * self.d..(m + 1) * self.d]
    }

    pub fn regular_point(&self, m: usize, n: usize) -> &[f64] {
        let i = m * self.n_r + n;
        &self.regular[i * self.d..(i + 1) * self.d]
    }

    pub fn boundary_point(&self, m: usize, n: usize) -> &[f64] {
        let i = m * self.n_b + n;
        &self.boundary[i * self.d..(i + 1) * self.d]
    }

    /// Number of singular points actually drawn.
    pub fn num_singular(&self) -> usize {
        if self.d == 1 {
            self.num_sources()
        } else {
            self.circles.iter().flatten().map(|c| c.points.len() / 2).sum()
        }
    }
}

const MAX_ATTEMPTS: usize = 1000;

fn uniform_point<R: Rng>(domain: Domain, rng: &mut R, out: &mut [f64]) {
    match domain {
        Domain::UnitInterval => out[0] = rng.gen::<f64>(),
        Domain::UnitDisc => {
            let r = rng.gen::<f64>().sqrt();
            let t = 2.0 * PI * rng.gen::<f64>();
            out[0] = r * t.cos();
            out[1] = r * t.sin();
        }
    }
}

/// Interior point with `0 < dist(x, ∂Ω)`; the open domain excludes the
/// measure-zero boundary draws.
fn interior_point<R: Rng>(domain: Domain, rng: &mut R, out: &mut [f64]) -> Result<()> {
    for _ in 0..MAX_ATTEMPTS {
        uniform_point(domain, rng, out);
        if domain.boundary_distance(out) > 0.0 {
            return Ok(());
        }
    }
    Err(Error::SamplingFailed { attempts: MAX_ATTEMPTS })
}

pub fn sample_collocation<R: Rng>(problem: &EllipticProblem, config: &TrainConfig, rng: &mut R) -> Result<CollocationBatch> {
    config.validate()?;
    let d = problem.dim();
    check_dim(config.dim(), d)?;
    let domain = problem.domain;
    let mut sources = vec![0.0; config.m * d];
    for m in 0..config.m {
        interior_point(domain, rng, &mut sources[m * d..(m + 1) * d])?;
    }
    let mut regular = vec![0.0; config.m * config.n_r * d];
    let mut regular_aug = Vec::with_capacity(config.m * config.n_r);
    let mut x = [0.0; 2];
    for m in 0..config.m {
        let y = &sources[m * d..(m + 1) * d];
        for n in 0..config.n_r {
            let mut accepted = false;
            for _ in 0..MAX_ATTEMPTS {
                interior_point(domain, rng, &mut x[..d])?;
                let r2: f64 = (0..d).map(|i| (x[i] - y[i]).powi(2)).sum();
                if r2.sqrt() >= config.r_excl {
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                return Err(Error::SamplingFailed { attempts: MAX_ATTEMPTS });
            }
            let i = m * config.n_r + n;
            regular[i * d..(i + 1) * d].copy_from_slice(&x[..d]);
            regular_aug.push(augmented_variable(config.kind, &x[..d], y)?);
        }
    }
    let mut boundary = vec![0.0; config.m * config.n_b * d];
    for m in 0..config.m {
        for n in 0..config.n_b {
            let i = m * config.n_b + n;
            match domain {
                Domain::UnitInterval => boundary[i] = if n % 2 == 0 { 0.0 } else { 1.0 },
                Domain::UnitDisc => {
                    let t = 2.0 * PI * rng.gen::<f64>();
                    boundary[2 * i] = t.cos();
                    boundary[2 * i + 1] = t.sin();
                }
            }
        }
    }
    let mut circles = Vec::new();
    if d == 2 {
        let per_circle = config.n_s / config.eps.len();
        for m in 0..config.m {
            let y = [sources[2 * m], sources[2 * m + 1]];
            let dist = domain.boundary_distance(&y);
            let mut kept = Vec::new();
            for &eps in &config.eps {
                if eps >= dist {
                    continue;
                }
                // equispaced angles under one random rotation
                let offset: f64 = rng.gen();
                let mut points = Vec::with_capacity(2 * per_circle);
                for k in 0..per_circle {
                    let t = 2.0 * PI * (k as f64 + offset) / per_circle as f64;
                    points.push(y[0] + eps * t.cos());
                    points.push(y[1] + eps * t.sin());
                }
                kept.push(SingularCircle { radius: eps, points });
            }
            circles.push(kept);
        }
    }
    Ok(CollocationBatch { d, kind: config.kind, n_r: config.n_r, n_b: config.n_b, sources, regular, regular_aug, boundary, circles })
}

/// A least-squares term: `scale * Σ_g (c_g + Σ_{s ∈ g} w_s · J_s)²`, where
/// `J_s` is the jet of sample `s` and groups are contiguous runs of samples.
#[derive(Debug, Clone)]
struct Term {
    query: JetQuery,
    weights: Vec<f64>,
    group: Vec<usize>,
    consts: Vec<f64>,
    beta: f64,
}

impl Term {
    fn new(input_dim: usize, k: usize, beta: f64) -> Self {
        Self { query: JetQuery::new(input_dim, k), weights: Vec::new(), group: Vec::new(), consts: Vec::new(), beta }
    }

    fn start_group(&mut self, c: f64) {
        self.consts.push(c);
    }

    fn push(&mut self, point: &[f64], seeds: &[&[f64]], w: &[f64]) {
        debug_assert_eq!(w.len(), jet_components(self.query.k()));
        self.query.push(point, seeds);
        self.weights.extend_from_slice(w);
        self.group.push(self.consts.len() - 1);
    }

    fn append(&mut self, other: &Term) {
        let off = self.consts.len();
        self.query.append(&other.query);
        self.weights.extend_from_slice(&other.weights);
        self.group.extend(other.group.iter().map(|g| g + off));
        self.consts.extend_from_slice(&other.consts);
    }

    fn residuals(&self, jets: &JetBatch) -> Vec<f64> {
        let c = jet_components(self.query.k());
        let mut r = self.consts.clone();
        for s in 0..jets.len() {
            let w = &self.weights[s * c..(s + 1) * c];
            r[self.group[s]] += w.iter().zip(jets.sample(s)).map(|(a, b)| a * b).sum::<f64>();
        }
        r
    }

    /// Mean squared group residual (unweighted by beta).
    fn mean_square(&self, jets: &JetBatch) -> f64 {
        if self.consts.is_empty() {
            return 0.0;
        }
        let r = self.residuals(jets);
        r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
    }

    fn adjoint(&self, jets: &JetBatch) -> (f64, JetBatch) {
        let mut adj = JetBatch::zeros(self.query.k(), jets.len());
        if self.consts.is_empty() {
            return (0.0, adj);
        }
        let c = jet_components(self.query.k());
        let r = self.residuals(jets);
        let scale = self.beta / r.len() as f64;
        let loss = scale * r.iter().map(|v| v * v).sum::<f64>();
        for s in 0..jets.len() {
            let f = 2.0 * scale * r[self.group[s]];
            let w = &self.weights[s * c..(s + 1) * c];
            for (a, wi) in adj.sample_mut(s).iter_mut().zip(w) {
                *a = f * wi;
            }
        }
        (loss, adj)
    }
}

/// The four loss terms restricted to some sources.
#[derive(Debug, Clone)]
struct LossTerms {
    reglr: Term,
    snglr: Term,
    bndry: Term,
    symtr: Term,
}

/// Weights for the penalty coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalties {
    pub snglr: f64,
    pub bndry: f64,
    pub symtr: f64,
}

impl Penalties {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self { snglr: c.beta_snglr, bndry: c.beta_bndry, symtr: c.beta_symtr }
    }
}

fn network_input(x: &[f64], y: &[f64], z: f64, out: &mut [f64]) {
    let d = x.len();
    out[..d].copy_from_slice(x);
    out[d..2 * d].copy_from_slice(y);
    out[2 * d] = z;
}

fn source_terms(batch: &CollocationBatch, problem: &EllipticProblem, m: usize, pen: &Penalties) -> LossTerms {
    let d = batch.d;
    let n_in = 2 * d + 1;
    let with_lap = batch.kind.has_laplacian(d);
    let k_reg = d + usize::from(with_lap);
    let c_reg = jet_components(k_reg);
    let y = batch.source(m);
    let mut p = vec![0.0; n_in];
    let mut gc = [0.0; 3];

    let mut reglr = Term::new(n_in, k_reg, 1.0);
    let mut symtr = Term::new(n_in, 0, pen.symtr);
    let mut seeds = vec![vec![0.0; n_in]; k_reg];
    let mut w = vec![0.0; c_reg];
    for n in 0..batch.n_r {
        let x = batch.regular_point(m, n);
        let aug = &batch.regular_aug[m * batch.n_r + n];
        network_input(x, y, aug.phi, &mut p);
        for (i, s) in seeds.iter_mut().enumerate() {
            s.iter_mut().for_each(|v| *v = 0.0);
            if i < d {
                // v_i = e_{x_i} + ∂_i φ e_z
                s[i] = 1.0;
                s[2 * d] = aug.grad[i];
            } else {
                s[2 * d] = 1.0;
            }
        }
        let c = (problem.c)(x);
        (problem.grad_c)(x, &mut gc[..d]);
        w.iter_mut().for_each(|v| *v = 0.0);
        w[0] = (problem.k2)(x);
        for i in 0..d {
            w[1 + i] = gc[i];
            w[1 + k_reg + crate::net::hess_index(k_reg, i, i)] = c;
        }
        if with_lap {
            w[1 + d] = c * aug.lap;
        }
        let refs: Vec<&[f64]> = seeds.iter().map(|s| s.as_slice()).collect();
        reglr.start_group(0.0);
        reglr.push(&p, &refs, &w);

        symtr.start_group(0.0);
        symtr.push(&p, &[], &[1.0]);
        let mut q = vec![0.0; n_in];
        network_input(y, x, aug.phi, &mut q);
        symtr.push(&q, &[], &[-1.0]);
    }

    let mut snglr = Term::new(n_in, 1, pen.snglr);
    if d == 1 {
        // ∂_z Ĝ at (y, y, 0), jump condition 2 c(y) ∂_z Ĝ + 1 = 0
        network_input(y, y, 0.0, &mut p);
        let mut ez = vec![0.0; n_in];
        ez[2] = 1.0;
        snglr.start_group(1.0);
        snglr.push(&p, &[&ez], &[0.0, 2.0 * (problem.c)(y), 0.0]);
    } else {
        for circle in &batch.circles[m] {
            let npts = circle.points.len() / d;
            let weight = 2.0 * PI * circle.radius / npts as f64;
            snglr.start_group(1.0);
            for k in 0..npts {
                let x = &circle.points[k * d..(k + 1) * d];
                let aug = augmented_variable(batch.kind, x, y).expect("circle point differs from source");
                network_input(x, y, aug.phi, &mut p);
                // outward normal direction lifted through φ
                let mut dir = vec![0.0; n_in];
                let mut gn = 0.0;
                for i in 0..d {
                    let ni = (x[i] - y[i]) / circle.radius;
                    dir[i] = ni;
                    gn += aug.grad[i] * ni;
                }
                dir[2 * d] = gn;
                snglr.push(&p, &[&dir], &[0.0, weight * (problem.c)(x), 0.0]);
            }
        }
    }

    let mut bndry = Term::new(n_in, 0, pen.bndry);
    for n in 0..batch.n_b {
        let x = batch.boundary_point(m, n);
        network_input(x, y, phi_value(batch.kind, x, y), &mut p);
        bndry.start_group(0.0);
        bndry.push(&p, &[], &[1.0]);
    }
    LossTerms { reglr, snglr, bndry, symtr }
}

fn merge_terms(parts: &[&LossTerms]) -> LossTerms {
    let mut it = parts.iter();
    let mut out = (*it.next().expect("at least one source")).clone();
    for t in it {
        out.reglr.append(&t.reglr);
        out.snglr.append(&t.snglr);
        out.bndry.append(&t.bndry);
        out.symtr.append(&t.symtr);
    }
    out
}

/// Unweighted loss parts and the β-weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub reglr: f64,
    pub snglr: f64,
    pub bndry: f64,
    pub symtr: f64,
    pub total: f64,
}

fn all_terms(batch: &CollocationBatch, problem: &EllipticProblem, pen: &Penalties) -> LossTerms {
    let per: Vec<LossTerms> = (0..batch.num_sources()).map(|m| source_terms(batch, problem, m, pen)).collect();
    merge_terms(&per.iter().collect::<Vec<_>>())
}

fn check_net(net: &MlpNetwork, batch: &CollocationBatch) -> Result<()> {
    check_dim(2 * batch.d + 1, net.input_dim())
}

fn term_mean(net: &MlpNetwork, t: &Term) -> Result<f64> {
    let jets = eval_jets(net, &t.query)?;
    let v = t.mean_square(&jets);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(non_finite("loss term"))
    }
}

const UNIT: Penalties = Penalties { snglr: 1.0, bndry: 1.0, symtr: 1.0 };

/// Mean squared interior residual.
pub fn loss_reglr(net: &MlpNetwork, batch: &CollocationBatch, problem: &EllipticProblem) -> Result<f64> {
    check_net(net, batch)?;
    term_mean(net, &all_terms(batch, problem, &UNIT).reglr)
}

/// Mean squared normalization (jump) residual.
pub fn loss_snglr(net: &MlpNetwork, batch: &CollocationBatch, problem: &EllipticProblem) -> Result<f64> {
    check_net(net, batch)?;
    term_mean(net, &all_terms(batch, problem, &UNIT).snglr)
}

/// Mean squared boundary value.
pub fn loss_bndry(net: &MlpNetwork, batch: &CollocationBatch, problem: &EllipticProblem) -> Result<f64> {
    check_net(net, batch)?;
    term_mean(net, &all_terms(batch, problem, &UNIT).bndry)
}

/// Mean squared difference between the two argument orders.
pub fn loss_symtr(net: &MlpNetwork, batch: &CollocationBatch, problem: &EllipticProblem) -> Result<f64> {
    check_net(net, batch)?;
    term_mean(net, &all_terms(batch, problem, &UNIT).symtr)
}

pub fn loss_parts(net: &MlpNetwork, batch: &CollocationBatch, problem: &EllipticProblem, pen: &Penalties) -> Result<LossParts> {
    check_net(net, batch)?;
    let t = all_terms(batch, problem, &UNIT);
    let reglr = term_mean(net, &t.reglr)?;
    let snglr = term_mean(net, &t.snglr)?;
    let bndry = term_mean(net, &t.bndry)?;
    let symtr = term_mean(net, &t.symtr)?;
    Ok(LossParts { reglr, snglr, bndry, symtr, total: reglr + pen.snglr * snglr + pen.bndry * bndry + pen.symtr * symtr })
}

fn terms_loss_grad(net: &MlpNetwork, t: &LossTerms) -> Result<(LossParts, crate::net::ParamGradient)> {
    let terms = [&t.reglr, &t.snglr, &t.bndry, &t.symtr];
    let queries: Vec<JetQuery> = terms.iter().map(|t| t.query.clone()).collect();
    let mut parts = LossParts::default();
    let (loss, grad) = loss_param_grad(net, &queries, |jets| {
        let mut total = 0.0;
        let mut adj = Vec::with_capacity(4);
        let mut vals = [0.0; 4];
        for (i, (term, j)) in terms.iter().zip(jets).enumerate() {
            let (l, a) = term.adjoint(j);
            vals[i] = if term.beta > 0.0 { l / term.beta } else { term.mean_square(j) };
            total += l;
            adj.push(a);
        }
        parts = LossParts { reglr: vals[0], snglr: vals[1], bndry: vals[2], symtr: vals[3], total };
        Ok((total, adj))
    })?;
    parts.total = loss;
    Ok((parts, grad))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub parts: LossParts,
}

/// Network plus the metadata needed to evaluate it as a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GreenSurrogate {
    pub net: MlpNetwork,
    pub d: usize,
    pub kind: AugmentedKind,
    pub domain: Domain,
    pub problem: ProblemId,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    d: usize,
    kind: AugmentedKind,
    domain: Domain,
    problem: ProblemId,
}

impl GreenSurrogate {
    pub fn new(net: MlpNetwork, problem: &EllipticProblem, kind: AugmentedKind) -> Result<Self> {
        let d = problem.dim();
        kind.validate(d)?;
        check_dim(2 * d + 1, net.input_dim())?;
        Ok(Self { net, d, kind, domain: problem.domain, problem: problem.id })
    }

    /// Raw network value `Ĝ(x, y, φ(x, y))`.
    pub fn raw(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut p = [0.0; 7];
        network_input(x, y, phi_value(self.kind, x, y), &mut p[..2 * self.d + 1]);
        self.net.forward(&p[..2 * self.d + 1]).expect("dimension checked at construction")
    }

    /// Raw values for many (x, y) pairs in one batched pass.
    pub fn raw_batch(&self, xs: &[f64], ys: &[f64]) -> Vec<f64> {
        let d = self.d;
        let n_in = 2 * d + 1;
        let n = xs.len() / d;
        let mut q = JetQuery::new(n_in, 0);
        let mut p = vec![0.0; n_in];
        for i in 0..n {
            let (x, y) = (&xs[i * d..(i + 1) * d], &ys[i * d..(i + 1) * d]);
            network_input(x, y, phi_value(self.kind, x, y), &mut p);
            q.push(&p, &[]);
        }
        let out = eval_jets(&self.net, &q).expect("dimension checked at construction");
        (0..n).map(|i| out.value(i)).collect()
    }

    /// `∂_z Ĝ(y, y, 0)`, used by the 1D jump diagnostics.
    pub fn dz_on_diagonal(&self, y: &[f64]) -> Result<f64> {
        let mut p = vec![0.0; 2 * self.d + 1];
        network_input(y, y, 0.0, &mut p);
        Ok(self.net.forward_jet2(&p)?.grad[2 * self.d])
    }

    pub fn save(&self, model_path: &Path) -> Result<()> {
        self.net.save(model_path)?;
        let side = Sidecar { d: self.d, kind: self.kind, domain: self.domain, problem: self.problem };
        let text = serde_json::to_string_pretty(&side).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(sidecar_path(model_path), text + "\n")?;
        Ok(())
    }

    pub fn load(model_path: &Path) -> Result<Self> {
        let net = MlpNetwork::load(model_path)?;
        let text = std::fs::read_to_string(sidecar_path(model_path))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        side.kind.validate(side.d)?;
        check_dim(2 * side.d + 1, net.input_dim())?;
        Ok(Self { net, d: side.d, kind: side.kind, domain: side.domain, problem: side.problem })
    }
}

/// `<model>.meta.json` next to the model file.
pub fn sidecar_path(model_path: &Path) -> std::path::PathBuf {
    let mut name = model_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    model_path.with_file_name(name)
}

impl Kernel for GreenSurrogate {
    fn dim(&self) -> usize {
        self.d
    }

    fn domain(&self) -> Domain {
        self.domain
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        0.5 * (self.raw(x, y) + self.raw(y, x))
    }

    fn eval_batch(&self, xs: &[f64], ys: &[f64]) -> Vec<f64> {
        let a = self.raw_batch(xs, ys);
        let b = self.raw_batch(ys, xs);
        a.iter().zip(&b).map(|(p, q)| 0.5 * (p + q)).collect()
    }

    fn continuous_diagonal(&self) -> bool {
        self.d == 1 && self.kind == AugmentedKind::Abs
    }
}

fn learning_rate(c: &TrainConfig, epoch: usize) -> f64 {
    let passed = c.milestones.iter().filter(|&&m| epoch >= m).count();
    c.lr * 0.1f64.powi(passed as i32)
}

/// Trains from a fresh network.
pub fn train(problem: &EllipticProblem, config: &TrainConfig) -> Result<(GreenSurrogate, Vec<EpochRecord>)> {
    let net = MlpNetwork::init(2 * problem.dim() + 1, config.depth, config.width, config.seed)?;
    train_from(problem, config, net, |_| {})
}

/// Trains `net` in place of a fresh initialization; `on_epoch` sees every
/// epoch record as it is produced.
pub fn train_from<F: FnMut(&EpochRecord)>(
    problem: &EllipticProblem,
    config: &TrainConfig,
    mut net: MlpNetwork,
    mut on_epoch: F,
) -> Result<(GreenSurrogate, Vec<EpochRecord>)> {
    config.validate()?;
    check_dim(config.dim(), problem.dim())?;
    if config.problem != problem.id {
        return Err(Error::InvalidConfig(format!(
            "config is for {} but the problem is {}",
            config.problem.as_str(),
            problem.id.as_str()
        )));
    }
    check_dim(2 * problem.dim() + 1, net.input_dim())?;
    let pen = Penalties::from_config(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5DEE_CE66_D1CE_5EED);
    let mut state = AdamWState::default();
    let mut log = Vec::with_capacity(config.epochs);
    let bs = config.batch_sources.clamp(1, config.m);
    let mut per_source: Vec<LossTerms> = Vec::new();
    let mut order: Vec<usize> = (0..config.m).collect();
    for epoch in 0..config.epochs {
        if epoch == 0 || (config.resample_every > 0 && epoch % config.resample_every == 0) {
            let batch = sample_collocation(problem, config, &mut rng)?;
            per_source = (0..config.m).map(|m| source_terms(&batch, problem, m, &pen)).collect();
        }
        let lr = learning_rate(config, epoch);
        let opt = AdamWConfig { lr, weight_decay: config.weight_decay, ..AdamWConfig::default() };
        if bs < config.m {
            order.shuffle(&mut rng);
        }
        let mut acc = LossParts::default();
        for chunk in order.chunks(bs) {
            let terms = merge_terms(&chunk.iter().map(|&m| &per_source[m]).collect::<Vec<_>>());
            let (parts, grad) = match terms_loss_grad(&net, &terms) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(Error::Divergence { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            let w = chunk.len() as f64 / config.m as f64;
            acc.reglr += w * parts.reglr;
            acc.snglr += w * parts.snglr;
            acc.bndry += w * parts.bndry;
            acc.symtr += w * parts.symtr;
            acc.total += w * parts.total;
            adamw_step(&mut net, &grad, &mut state, &opt)?;
        }
        if !acc.total.is_finite() {
            return Err(Error::Divergence { epoch, loss: acc.total });
        }
        let rec = EpochRecord { epoch, lr, parts: acc };
        if config.log_every > 0 && (epoch % config.log_every == 0 || epoch + 1 == config.epochs) {
            info!(
                "epoch {epoch:>6} lr {lr:.1e} loss {:.3e} (reglr {:.2e} snglr {:.2e} bndry {:.2e} symtr {:.2e})",
                acc.total, acc.reglr, acc.snglr, acc.bndry, acc.symtr
            );
        }
        on_epoch(&rec);
        log.push(rec);
    }
    Ok((GreenSurrogate::new(net, problem, config.kind)?, log))
}

/// CSV loss log, one row per `every` epochs plus the last.
pub fn write_loss_log<W: std::io::Write>(log: &[EpochRecord], every: usize, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["epoch", "lr", "total", "reglr", "snglr", "bndry", "symtr"]).map_err(csv_err)?;
    let every = every.max(1);
    for (i, r) in log.iter().enumerate() {
        if r.epoch % every != 0 && i + 1 != log.len() {
            continue;
        }
        let p = r.parts;
        let row = [r.epoch.to_string()]
            .into_iter()
            .chain([r.lr, p.total, p.reglr, p.snglr, p.bndry, p.symtr].into_iter().map(|v| format!("{v:.16e}")));
        wr.write_record(row).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::problem;

    fn small_config(id: ProblemId) -> TrainConfig {
        let mut c = TrainConfig::reference(id);
        c.n_r = 12;
        c.m = 5;
        c.batch_sources = 5;
        if id == ProblemId::PoissonDisc {
            c.n_s = 16;
            c.n_b = 6;
            c.depth = 2;
            c.width = 8;
        } else {
            c.n_s = 5;
        }
        c.epochs = 0;
        c
    }

    /// Network reading only the listed input with the given weight, through
    /// a near-linear tanh unit: out = (1/s) tanh(s · a·x).
    fn linear_net(input_dim: usize, a: &[f64], s: f64) -> MlpNetwork {
        let w0: Vec<f64> = a.iter().map(|v| v * s).collect();
        MlpNetwork::from_layers(input_dim, &[(w0, vec![0.0]), (vec![1.0 / s], vec![0.0])]).unwrap()
    }

    #[test]
    fn augmented_examples() {
        let a = augmented_variable(AugmentedKind::Abs, &[0.7], &[0.3]).unwrap();
        assert!((a.phi - 0.4).abs() < 1e-15 && a.grad[0] == 1.0 && a.lap == 0.0);
        let l = augmented_variable(AugmentedKind::Log, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!((l.phi, l.grad[0], l.grad[1], l.grad_norm2, l.lap), (0.0, 1.0, 0.0, 1.0, 0.0));
        let x = [2.0, 0.0, 0.0];
        let p = augmented_variable(AugmentedKind::Power(-1.0), &x, &[0.0; 3]).unwrap();
        assert!((p.phi - 0.5).abs() < 1e-15);
        assert!((p.grad[0] + 2.0 / 8.0).abs() < 1e-15);
        assert!(p.lap.abs() < 1e-15);
        assert!(matches!(augmented_variable(AugmentedKind::Log, &[0.1, 0.1], &[0.1, 0.1]), Err(Error::SingularPoint)));
    }

    #[test]
    fn power_derivatives_match_finite_differences() {
        let kind = AugmentedKind::Power(-0.2);
        let y = [0.1, -0.3];
        let x = [0.4, 0.2];
        let a = augmented_variable(kind, &x, &y).unwrap();
        let h = 1e-5;
        let f = |x: [f64; 2]| phi_value(kind, &x, &y);
        let mut lap = 0.0;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            assert!(((f(xp) - f(xm)) / (2.0 * h) - a.grad[i]).abs() < 1e-8);
            lap += (f(xp) - 2.0 * f(x) + f(xm)) / (h * h);
        }
        assert!((lap - a.lap).abs() < 1e-4 * a.lap.abs());
        assert!((a.grad_norm2 - (a.grad[0].powi(2) + a.grad[1].powi(2))).abs() < 1e-12);
    }

    #[test]
    fn kind_validation_and_parsing() {
        assert!(AugmentedKind::Abs.validate(1).is_ok());
        assert!(AugmentedKind::Abs.validate(2).is_err());
        assert!(AugmentedKind::Log.validate(1).is_err());
        assert!(AugmentedKind::Power(-0.2).validate(2).is_ok());
        assert!(AugmentedKind::Power(0.5).validate(2).is_err());
        assert!(AugmentedKind::Power(-1.0).validate(3).is_ok());
        assert_eq!(AugmentedKind::parse("power(-0.2)").unwrap(), AugmentedKind::Power(-0.2));
        assert_eq!(AugmentedKind::parse(&AugmentedKind::Log.to_string()).unwrap(), AugmentedKind::Log);
        assert!(AugmentedKind::parse("cubic").is_err());
    }

    #[test]
    fn sampler_cardinalities() {
        let p = problem(ProblemId::Poisson1d);
        let c = TrainConfig { epochs: 0, ..TrainConfig::reference(ProblemId::Poisson1d) };
        let b = sample_collocation(&p, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.num_sources(), 500);
        assert_eq!(b.regular.len(), 160 * 500);
        assert_eq!(b.boundary.len(), 2 * 500);
        assert_eq!(b.num_singular(), 500);
        for m in 0..500 {
            for n in 0..160 {
                assert!((b.regular_point(m, n)[0] - b.source(m)[0]).abs() >= c.r_excl);
            }
        }
        let p2 = problem(ProblemId::PoissonDisc);
        let c2 = TrainConfig { m: 20, ..TrainConfig::reference(ProblemId::PoissonDisc) };
        let b2 = sample_collocation(&p2, &c2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (m, circles) in b2.circles.iter().enumerate() {
            let y = b2.source(m);
            let dist = Domain::UnitDisc.boundary_distance(y);
            let expect = c2.eps.iter().filter(|&&e| e < dist).count();
            assert_eq!(circles.len(), expect);
            for c in circles {
                assert_eq!(c.points.len() / 2, 50);
                for k in 0..50 {
                    let r = ((c.points[2 * k] - y[0]).powi(2) + (c.points[2 * k + 1] - y[1]).powi(2)).sqrt();
                    assert!((r - c.radius).abs() < 1e-12);
                }
            }
        }
        assert!(b2.circles.iter().any(|c| c.len() == 4));
        for i in 0..b2.regular.len() / 2 {
            let r2 = b2.regular[2 * i].powi(2) + b2.regular[2 * i + 1].powi(2);
            assert!(r2 < 1.0);
        }
    }

    #[test]
    fn zero_network_losses() {
        let p = problem(ProblemId::Poisson1d);
        let c = small_config(ProblemId::Poisson1d);
        let b = sample_collocation(&p, &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut net = MlpNetwork::init(3, 2, 6, 0).unwrap();
        net.scale_output(0.0);
        assert_eq!(loss_reglr(&net, &b, &p).unwrap(), 0.0);
        assert_eq!(loss_bndry(&net, &b, &p).unwrap(), 0.0);
        assert_eq!(loss_symtr(&net, &b, &p).unwrap(), 0.0);
        assert_eq!(loss_snglr(&net, &b, &p).unwrap(), 1.0);
        // constant network
        let n = net.num_params();
        net.params_mut()[n - 1] = 0.3;
        assert!((loss_bndry(&net, &b, &p).unwrap() - 0.09).abs() < 1e-15);
    }

    #[test]
    fn z_only_network_has_zero_interior_residual() {
        let p = problem(ProblemId::Poisson1d);
        let c = small_config(ProblemId::Poisson1d);
        let b = sample_collocation(&p, &c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // Ĝ = z through a unit with tiny slope is not exactly linear, so use
        // a hand network that is exactly affine in z: out = tanh(0)… instead
        // check the composed function |x-y| is harmonic off the diagonal.
        let net = linear_net(3, &[0.0, 0.0, 1.0], 1e-4);
        assert!(loss_reglr(&net, &b, &p).unwrap() < 1e-14);
        assert!(loss_symtr(&net, &b, &p).unwrap() < 1e-30);
    }

    #[test]
    fn singular_loss_vanishes_for_exact_jump() {
        let p = problem(ProblemId::Poisson1d);
        let c = small_config(ProblemId::Poisson1d);
        let b = sample_collocation(&p, &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        // ∂_z Ĝ = -1/2 exactly: out = -(1/2) z via tanh-free path is not
        // available, so take the 1e-6-linear regime and a loose bound
        let net = linear_net(3, &[0.0, 0.0, -0.5], 1e-6);
        assert!(loss_snglr(&net, &b, &p).unwrap() < 1e-20);
    }

    #[test]
    fn fundamental_solution_satisfies_normalization() {
        let p = problem(ProblemId::PoissonDisc);
        let c = small_config(ProblemId::PoissonDisc);
        let b = sample_collocation(&p, &c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let net = linear_net(5, &[0.0, 0.0, 0.0, 0.0, -1.0 / (2.0 * PI)], 1e-6);
        assert!(loss_snglr(&net, &b, &p).unwrap() < 1e-16);
        assert!(loss_reglr(&net, &b, &p).unwrap() < 1e-12);
    }

    #[test]
    fn symmetry_loss_hand_value() {
        let p = problem(ProblemId::Poisson1d);
        let c = small_config(ProblemId::Poisson1d);
        let b = sample_collocation(&p, &c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let net = linear_net(3, &[1.0, -1.0, 0.0], 1e-5);
        let mut expect = 0.0;
        for m in 0..b.num_sources() {
            for n in 0..b.n_r {
                expect += (2.0 * (b.regular_point(m, n)[0] - b.source(m)[0])).powi(2);
            }
        }
        expect /= (b.num_sources() * b.n_r) as f64;
        let got = loss_symtr(&net, &b, &p).unwrap();
        assert!((got - expect).abs() < 1e-8 * expect);
    }

    /// G(x) = Ĝ(x, y, φ(x, y)) differentiated by finite differences.
    fn composed_residual(net: &MlpNetwork, p: &EllipticProblem, kind: AugmentedKind, x: &[f64], y: &[f64]) -> f64 {
        let d = x.len();
        let g = |x: &[f64]| {
            let mut inp = vec![0.0; 2 * d + 1];
            network_input(x, y, phi_value(kind, x, y), &mut inp);
            net.forward(&inp).unwrap()
        };
        let h = 1e-4;
        let cf = |x: &[f64]| (p.c)(x);
        let mut div = 0.0;
        for i in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h / 2.0;
            xm[i] -= h / 2.0;
            let flux = |z: &[f64]| {
                let mut zp = z.to_vec();
                let mut zm = z.to_vec();
                zp[i] += h / 2.0;
                zm[i] -= h / 2.0;
                cf(z) * (g(&zp) - g(&zm)) / h
            };
            div += (flux(&xp) - flux(&xm)) / h;
        }
        div + (p.k2)(x) * g(x)
    }

    #[test]
    fn interior_residual_matches_composed_finite_differences() {
        for (id, kind) in [
            (ProblemId::Helmholtz1d, AugmentedKind::Abs),
            (ProblemId::PoissonDisc, AugmentedKind::Log),
            (ProblemId::PoissonDisc, AugmentedKind::Power(-0.2)),
        ] {
            let p = problem(id);
            let mut c = small_config(id);
            c.kind = kind;
            c.m = 1;
            c.n_r = 6;
            if p.dim() == 1 {
                c.n_s = 1;
            }
            let b = sample_collocation(&p, &c, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
            let net = MlpNetwork::init(2 * p.dim() + 1, 2, 10, 9).unwrap();
            let terms = all_terms(&b, &p, &UNIT);
            let jets = eval_jets(&net, &terms.reglr.query).unwrap();
            let res = terms.reglr.residuals(&jets);
            for n in 0..b.n_r {
                let x = b.regular_point(0, n);
                if x.iter().zip(b.source(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) < 0.05 {
                    continue;
                }
                let fd = composed_residual(&net, &p, kind, x, b.source(0));
                assert!((fd - res[n]).abs() <= 1e-4 * res[n].abs().max(1.0), "{id:?} {kind}: {fd} vs {}", res[n]);
            }
        }
    }

    #[test]
    fn total_is_weighted_sum_and_gradient_is_consistent() {
        let p = problem(ProblemId::PoissonDisc);
        let c = small_config(ProblemId::PoissonDisc);
        let b = sample_collocation(&p, &c, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut net = MlpNetwork::init(5, 2, 6, 3).unwrap();
        let pen = Penalties { snglr: 3.0, bndry: 5.0, symtr: 7.0 };
        let parts = loss_parts(&net, &b, &p, &pen).unwrap();
        let t = all_terms(&b, &p, &pen);
        let (gp, grad) = terms_loss_grad(&net, &t).unwrap();
        assert!((gp.total - parts.total).abs() < 1e-12 * parts.total);
        assert!((parts.total - (parts.reglr + 3.0 * parts.snglr + 5.0 * parts.bndry + 7.0 * parts.symtr)).abs() < 1e-12);
        let h = 1e-6;
        for idx in [0, 7, 40, net.num_params() - 1] {
            let orig = net.params()[idx];
            net.params_mut()[idx] = orig + h;
            let lp = loss_parts(&net, &b, &p, &pen).unwrap().total;
            net.params_mut()[idx] = orig - h;
            let lm = loss_parts(&net, &b, &p, &pen).unwrap().total;
            net.params_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad.as_slice()[idx]).abs() < 1e-5 * fd.abs().max(1.0));
        }
        // output scaling by α scales boundary and symmetry losses by α²
        let before = (loss_bndry(&net, &b, &p).unwrap(), loss_symtr(&net, &b, &p).unwrap());
        net.scale_output(3.0);
        let after = (loss_bndry(&net, &b, &p).unwrap(), loss_symtr(&net, &b, &p).unwrap());
        assert!((after.0 - 9.0 * before.0).abs() < 1e-12 * after.0);
        assert!((after.1 - 9.0 * before.1).abs() < 1e-12 * after.1);
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let p = problem(ProblemId::Poisson1d);
        let c = small_config(ProblemId::Poisson1d);
        let init = MlpNetwork::init(3, c.depth, c.width, c.seed).unwrap();
        let (s, log) = train(&p, &c).unwrap();
        assert!(log.is_empty());
        assert_eq!(s.net, init);
    }

    #[test]
    fn short_training_is_deterministic_and_decreases_loss() {
        let p = problem(ProblemId::Poisson1d);
        let mut c = small_config(ProblemId::Poisson1d);
        c.epochs = 60;
        c.lr = 1e-2;
        c.width = 10;
        let (a, la) = train(&p, &c).unwrap();
        let (b, lb) = train(&p, &c).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(la, lb);
        assert!(la.last().unwrap().parts.total < 0.5 * la[0].parts.total);
    }

    #[test]
    fn surrogate_is_exactly_symmetric_and_round_trips() {
        let p = problem(ProblemId::PoissonDisc);
        let net = MlpNetwork::init(5, 2, 8, 1).unwrap();
        let s = GreenSurrogate::new(net, &p, AugmentedKind::Log).unwrap();
        let (x, y) = ([0.3, -0.1], [-0.55, 0.2]);
        assert_eq!(s.eval(&x, &y).to_bits(), s.eval(&y, &x).to_bits());
        let xs = [0.3, -0.1, 0.1, 0.1];
        let ys = [-0.55, 0.2, 0.0, 0.5];
        let batch = s.eval_batch(&xs, &ys);
        assert!((batch[0] - s.eval(&x, &y)).abs() < 1e-14);
        let dir = std::env::temp_dir().join(format!("greenkit-sur-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.json");
        s.save(&path).unwrap();
        let back = GreenSurrogate::load(&path).unwrap();
        assert_eq!(back, s);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
