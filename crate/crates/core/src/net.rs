//! Tanh multilayer perceptron with exact second-order input jets and a
//! reverse pass over the jet computation for parameter gradients.
//!
//! Jets are directional: each sample carries `k` seed directions in input
//! space and the engine propagates the value, the `k` first directional
//! derivatives and the packed symmetric `k x k` block of second directional
//! derivatives. Identity seeds give the full gradient and Hessian.

use faer::linalg::matmul::matmul;
use faer::{Accum, MatMut, MatRef, Par};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{check_dim, non_finite, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Number of jet components for `k` seed directions.
pub const fn jet_components(k: usize) -> usize {
    1 + k + k * (k + 1) / 2
}

/// Position of the (a, b) second derivative in the packed upper triangle.
pub fn hess_index(k: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    a * k - a * a.saturating_sub(1) / 2 + (b - a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    input_dim: usize,
    depth: usize,
    width: usize,
    shapes: Vec<LayerShape>,
    params: Vec<f64>,
}

fn layout(input_dim: usize, depth: usize, width: usize) -> (Vec<LayerShape>, usize) {
    let mut shapes = Vec::with_capacity(depth + 1);
    let mut off = 0;
    for l in 0..=depth {
        let cols = if l == 0 { input_dim } else { width };
        let rows = if l == depth { 1 } else { width };
        shapes.push(LayerShape { rows, cols, w_off: off, b_off: off + rows * cols });
        off += rows * cols + rows;
    }
    (shapes, off)
}

impl MlpNetwork {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    pub fn init(input_dim: usize, depth: usize, width: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || depth == 0 || width == 0 {
            return Err(Error::InvalidConfig(format!(
                "network dimensions must be positive (input_dim={input_dim}, depth={depth}, width={width})"
            )));
        }
        let (shapes, total) = layout(input_dim, depth, width);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &shapes {
            let bound = 1.0 / (s.cols as f64).sqrt();
            for p in &mut params[s.w_off..s.b_off] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(Self { input_dim, depth, width, shapes, params })
    }

    /// Builds a network from explicit row-major weights and biases.
    pub fn from_layers(input_dim: usize, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidConfig("need at least one hidden layer".into()));
        }
        let depth = layers.len() - 1;
        let width = layers[0].1.len();
        let (shapes, total) = layout(input_dim, depth, width);
        let mut params = vec![0.0; total];
        for (s, (w, b)) in shapes.iter().zip(layers) {
            check_dim(s.rows * s.cols, w.len())?;
            check_dim(s.rows, b.len())?;
            params[s.w_off..s.b_off].copy_from_slice(w);
            params[s.b_off..s.b_off + s.rows].copy_from_slice(b);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(non_finite("network parameters"));
        }
        Ok(Self { input_dim, depth, width, shapes, params })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Row-major weights of layer `l`.
    pub fn weights(&self, l: usize) -> &[f64] {
        let s = self.shapes[l];
        &self.params[s.w_off..s.b_off]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let s = self.shapes[l];
        &self.params[s.b_off..s.b_off + s.rows]
    }

    /// Multiplies the output layer (weights and bias) by `alpha`.
    pub fn scale_output(&mut self, alpha: f64) {
        let s = self.shapes[self.depth];
        self.params[s.w_off..s.b_off + s.rows].iter_mut().for_each(|p| *p *= alpha);
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.input_dim, x.len())?;
        let mut h = x.to_vec();
        for (l, s) in self.shapes.iter().enumerate() {
            let w = self.weights(l);
            let b = self.bias(l);
            let mut out: Vec<f64> = (0..s.rows)
                .map(|i| b[i] + w[i * s.cols..(i + 1) * s.cols].iter().zip(&h).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if l < self.depth {
                out.iter_mut().for_each(|v| *v = tanh_scalar(*v));
            }
            h = out;
        }
        Ok(h[0])
    }

    /// Value, gradient and Hessian with respect to the input.
    pub fn forward_jet2(&self, x: &[f64]) -> Result<Jet2> {
        check_dim(self.input_dim, x.len())?;
        let n = self.input_dim;
        let mut q = JetQuery::new(n, n);
        let seeds: Vec<Vec<f64>> = (0..n).map(|a| (0..n).map(|i| if i == a { 1.0 } else { 0.0 }).collect()).collect();
        let refs: Vec<&[f64]> = seeds.iter().map(|s| s.as_slice()).collect();
        q.push(x, &refs);
        let out = eval_jets(self, &q)?;
        Ok(Jet2 {
            value: out.value(0),
            grad: (0..n).map(|a| out.first(0, a)).collect(),
            hess: (0..n * (n + 1) / 2).map(|p| out.sample(0)[1 + n + p]).collect(),
        })
    }
}

/// Value, gradient and packed symmetric Hessian of a scalar function.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2 {
    pub value: f64,
    pub grad: Vec<f64>,
    hess: Vec<f64>,
}

impl Jet2 {
    pub fn hess(&self, i: usize, j: usize) -> f64 {
        self.hess[hess_index(self.grad.len(), i, j)]
    }
}

/// Parameter gradient with the same flat layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    shapes: Vec<LayerShape>,
    data: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros_like(net: &MlpNetwork) -> Self {
        Self { shapes: net.shapes.clone(), data: vec![0.0; net.num_params()] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let s = self.shapes[l];
        &self.data[s.w_off..s.b_off]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let s = self.shapes[l];
        &self.data[s.b_off..s.b_off + s.rows]
    }

    pub fn congruent_with(&self, net: &MlpNetwork) -> bool {
        self.shapes == net.shapes
    }
}

/// Sample points plus per-sample seed directions.
#[derive(Debug, Clone)]
pub struct JetQuery {
    input_dim: usize,
    k: usize,
    points: Vec<f64>,
    seeds: Vec<f64>,
}

impl JetQuery {
    pub fn new(input_dim: usize, k: usize) -> Self {
        Self { input_dim, k, points: Vec::new(), seeds: Vec::new() }
    }

    pub fn push(&mut self, point: &[f64], seeds: &[&[f64]]) {
        assert_eq!(point.len(), self.input_dim);
        assert_eq!(seeds.len(), self.k);
        self.points.extend_from_slice(point);
        for s in seeds {
            assert_eq!(s.len(), self.input_dim);
            self.seeds.extend_from_slice(s);
        }
    }

    /// Appends every sample of `other`.
    pub fn append(&mut self, other: &JetQuery) {
        assert_eq!((self.input_dim, self.k), (other.input_dim, other.k));
        self.points.extend_from_slice(&other.points);
        self.seeds.extend_from_slice(&other.seeds);
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// Jet outputs (or their adjoints), sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JetBatch {
    k: usize,
    len: usize,
    data: Vec<f64>,
}

impl JetBatch {
    pub fn zeros(k: usize, len: usize) -> Self {
        Self { k, len, data: vec![0.0; len * jet_components(k)] }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let c = jet_components(self.k);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let c = jet_components(self.k);
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn value(&self, i: usize) -> f64 {
        self.sample(i)[0]
    }

    pub fn first(&self, i: usize, a: usize) -> f64 {
        self.sample(i)[1 + a]
    }

    pub fn second(&self, i: usize, a: usize, b: usize) -> f64 {
        self.sample(i)[1 + self.k + hess_index(self.k, a, b)]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.sample_mut(i)[0]
    }

    pub fn first_mut(&mut self, i: usize, a: usize) -> &mut f64 {
        &mut self.sample_mut(i)[1 + a]
    }

    pub fn second_mut(&mut self, i: usize, a: usize, b: usize) -> &mut f64 {
        let k = self.k;
        &mut self.sample_mut(i)[1 + k + hess_index(k, a, b)]
    }
}

/// Column budget per chunk (components times samples).
const CHUNK_COLS: usize = 2_048;
/// Upper bound on cached activations kept between the forward and backward
/// passes, in f64 entries (about 768 MB).
const CACHE_BUDGET: usize = 0;

struct ChunkCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ChunkCache {
    fn entries(&self) -> usize {
        self.inputs.iter().chain(&self.pre).map(Vec::len).sum()
    }
}

fn chunk_len(k: usize) -> usize {
    (CHUNK_COLS / jet_components(k)).max(1)
}

/// Forward pass over `nb` samples starting at `start`. Buffers are column
/// major with `C * nb` columns, column `c * nb + b` holding component `c` of
/// sample `b`, so each component block is a contiguous slice.
fn forward_chunk(net: &MlpNetwork, q: &JetQuery, start: usize, nb: usize, store: bool) -> (Vec<f64>, Option<ChunkCache>) {
    let k = q.k;
    let c = jet_components(k);
    let n = net.input_dim;
    let cols = c * nb;
    let mut h = vec![0.0; n * cols];
    for b in 0..nb {
        let s = start + b;
        h[b * n..(b + 1) * n].copy_from_slice(q.point(s));
        for a in 0..k {
            let col = (1 + a) * nb + b;
            let off = (s * k + a) * n;
            h[col * n..(col + 1) * n].copy_from_slice(&q.seeds[off..off + n]);
        }
    }
    let mut cache = store.then(|| ChunkCache { inputs: Vec::new(), pre: Vec::new() });
    for (l, s) in net.shapes.iter().enumerate() {
        let mut a = vec![0.0; s.rows * cols];
        {
            let w = MatRef::from_row_major_slice(net.weights(l), s.rows, s.cols);
            let hin = MatRef::from_column_major_slice(&h, s.cols, cols);
            let dst = MatMut::from_column_major_slice_mut(&mut a, s.rows, cols);
            matmul(dst, Accum::Replace, w, hin, 1.0, Par::Seq);
        }
        let bias = net.bias(l);
        for b in 0..nb {
            for (i, bi) in bias.iter().enumerate() {
                a[b * s.rows + i] += bi;
            }
        }
        if l == net.depth {
            if let Some(cc) = cache.as_mut() {
                cc.inputs.push(h);
            }
            return (a, cache);
        }
        let next = activate(&a, s.rows * nb, k);
        if let Some(cc) = cache.as_mut() {
            cc.inputs.push(std::mem::replace(&mut h, next));
            cc.pre.push(a);
        } else {
            h = next;
        }
    }
    unreachable!("network has an output layer")
}

/// `e^x` for `x <= 0`, accurate to a few ulp; written so that the slice
/// loop below vectorizes.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let x = x.max(-700.0);
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let n = t - SHIFT;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    const INV_FACT: [f64; 14] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5_040.0,
        1.0 / 40_320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
    ];
    let mut p = INV_FACT[13];
    for c in INV_FACT[..13].iter().rev() {
        p = p * r + c;
    }
    let bits = t.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(1023) << 52;
    p * f64::from_bits(bits)
}

#[inline(always)]
fn tanh_scalar(x: f64) -> f64 {
    let ax = x.abs();
    let e = exp_nonpositive(-2.0 * ax);
    let big = (1.0 - e) / (1.0 + e);
    // Lambert continued fraction, folded into one division
    let x2 = ax * ax;
    let mut num = 17.0;
    let mut den = 1.0;
    for j in (1..8).rev() {
        let nn = (2 * j + 1) as f64 * num + x2 * den;
        den = num;
        num = nn;
    }
    let small = ax * num / (num + x2 * den);
    let v = if ax < 0.55 { small } else { big };
    v.copysign(x)
}

#[inline(always)]
fn tanh_slice_generic(src: &[f64], dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = tanh_scalar(*s);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tanh_slice_avx2(src: &[f64], dst: &mut [f64]) {
    tanh_slice_generic(src, dst)
}

fn tanh_slice(src: &[f64], dst: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were just detected.
            unsafe { tanh_slice_avx2(src, dst) };
            return;
        }
    }
    tanh_slice_generic(src, dst)
}

/// Pushes a pre-activation jet through tanh. `len` is rows times samples.
fn activate(a: &[f64], len: usize, k: usize) -> Vec<f64> {
    let c = jet_components(k);
    let mut h = vec![0.0; c * len];
    let (t, rest) = h.split_at_mut(len);
    tanh_slice(&a[..len], t);
    for g in 0..k {
        let src = &a[(1 + g) * len..(2 + g) * len];
        let dst = &mut rest[g * len..(g + 1) * len];
        for j in 0..len {
            dst[j] = (1.0 - t[j] * t[j]) * src[j];
        }
    }
    for p in 0..k {
        for q in p..k {
            let blk = 1 + k + hess_index(k, p, q);
            let ap = &a[(1 + p) * len..(2 + p) * len];
            let aq = &a[(1 + q) * len..(2 + q) * len];
            let ah = &a[blk * len..(blk + 1) * len];
            let dst = &mut rest[(blk - 1) * len..blk * len];
            for j in 0..len {
                let d1 = 1.0 - t[j] * t[j];
                dst[j] = d1 * ah[j] - 2.0 * t[j] * d1 * ap[j] * aq[j];
            }
        }
    }
    h
}

/// Adjoint of `activate`: maps the adjoint of the post-activation jet to
/// the adjoint of the pre-activation jet. `t` holds the tanh values saved by
/// the forward pass.
fn activate_backward(hbar: &[f64], a: &[f64], t: &[f64], len: usize, k: usize) -> Vec<f64> {
    let c = jet_components(k);
    let mut abar = vec![0.0; c * len];
    for j in 0..len {
        abar[j] = (1.0 - t[j] * t[j]) * hbar[j];
    }
    for g in 0..k {
        let ag = &a[(1 + g) * len..(2 + g) * len];
        let hg = &hbar[(1 + g) * len..(2 + g) * len];
        for j in 0..len {
            let d1 = 1.0 - t[j] * t[j];
            abar[j] += -2.0 * t[j] * d1 * ag[j] * hg[j];
            abar[(1 + g) * len + j] = d1 * hg[j];
        }
    }
    for p in 0..k {
        for q in p..k {
            let blk = 1 + k + hess_index(k, p, q);
            let hh = &hbar[blk * len..(blk + 1) * len];
            let ah = &a[blk * len..(blk + 1) * len];
            for j in 0..len {
                let tj = t[j];
                let d1 = 1.0 - tj * tj;
                let d2 = -2.0 * tj * d1;
                let d3 = (6.0 * tj * tj - 2.0) * d1;
                let ap = a[(1 + p) * len + j];
                let aq = a[(1 + q) * len + j];
                abar[j] += hh[j] * (d3 * ap * aq + d2 * ah[j]);
                abar[blk * len + j] = d1 * hh[j];
                let w = d2 * hh[j];
                if p == q {
                    abar[(1 + p) * len + j] += 2.0 * w * ap;
                } else {
                    abar[(1 + p) * len + j] += w * aq;
                    abar[(1 + q) * len + j] += w * ap;
                }
            }
        }
    }
    abar
}

fn backward_chunk(net: &MlpNetwork, cache: &ChunkCache, k: usize, nb: usize, out_bar: Vec<f64>, grad: &mut [f64]) {
    let cols = jet_components(k) * nb;
    let mut g = out_bar;
    for l in (0..=net.depth).rev() {
        let s = net.shapes[l];
        let hin = &cache.inputs[l];
        {
            let gm = MatRef::from_column_major_slice(&g, s.rows, cols);
            let hm = MatRef::from_column_major_slice(hin, s.cols, cols);
            let dst = MatMut::from_row_major_slice_mut(&mut grad[s.w_off..s.b_off], s.rows, s.cols);
            matmul(dst, Accum::Add, gm, hm.transpose(), 1.0, Par::Seq);
        }
        let gb = &mut grad[s.b_off..s.b_off + s.rows];
        for b in 0..nb {
            for i in 0..s.rows {
                gb[i] += g[b * s.rows + i];
            }
        }
        if l == 0 {
            break;
        }
        let mut hbar = vec![0.0; s.cols * cols];
        {
            let w = MatRef::from_row_major_slice(net.weights(l), s.rows, s.cols);
            let gm = MatRef::from_column_major_slice(&g, s.rows, cols);
            let dst = MatMut::from_column_major_slice_mut(&mut hbar, s.cols, cols);
            matmul(dst, Accum::Replace, w.transpose(), gm, 1.0, Par::Seq);
        }
        g = activate_backward(&hbar, &cache.pre[l - 1], &hin[..s.cols * nb], s.cols * nb, k);
    }
}

fn scatter_output(out: &[f64], k: usize, start: usize, nb: usize, batch: &mut JetBatch) {
    let c = jet_components(k);
    for b in 0..nb {
        let dst = batch.sample_mut(start + b);
        for comp in 0..c {
            dst[comp] = out[comp * nb + b];
        }
    }
}

fn gather_adjoint(adj: &JetBatch, k: usize, start: usize, nb: usize) -> Vec<f64> {
    let c = jet_components(k);
    let mut out = vec![0.0; c * nb];
    for b in 0..nb {
        let src = adj.sample(start + b);
        for comp in 0..c {
            out[comp * nb + b] = src[comp];
        }
    }
    out
}

pub fn eval_jets(net: &MlpNetwork, q: &JetQuery) -> Result<JetBatch> {
    check_dim(net.input_dim, q.input_dim)?;
    let mut batch = JetBatch::zeros(q.k, q.len());
    let step = chunk_len(q.k);
    let mut start = 0;
    while start < q.len() {
        let nb = step.min(q.len() - start);
        let (out, _) = forward_chunk(net, q, start, nb, false);
        scatter_output(&out, q.k, start, nb, &mut batch);
        start += nb;
    }
    Ok(batch)
}

/// Evaluates the loss built by `evaluator` from the jets of every query and
/// its exact parameter gradient. The evaluator returns the loss and the
/// adjoint of the loss with respect to each jet component.
pub fn loss_param_grad<F>(net: &MlpNetwork, queries: &[JetQuery], evaluator: F) -> Result<(f64, ParamGradient)>
where
    F: FnOnce(&[JetBatch]) -> Result<(f64, Vec<JetBatch>)>,
{
    let mut outputs = Vec::with_capacity(queries.len());
    let mut caches: Vec<Vec<Option<ChunkCache>>> = Vec::with_capacity(queries.len());
    let mut cached = 0usize;
    for q in queries {
        check_dim(net.input_dim, q.input_dim)?;
        let mut batch = JetBatch::zeros(q.k, q.len());
        let mut qc = Vec::new();
        let step = chunk_len(q.k);
        let mut start = 0;
        while start < q.len() {
            let nb = step.min(q.len() - start);
            let (out, cache) = forward_chunk(net, q, start, nb, cached < CACHE_BUDGET);
            scatter_output(&out, q.k, start, nb, &mut batch);
            if let Some(c) = &cache {
                cached += c.entries();
            }
            qc.push(cache);
            start += nb;
        }
        outputs.push(batch);
        caches.push(qc);
    }
    let (loss, adjoints) = evaluator(&outputs)?;
    if !loss.is_finite() {
        return Err(non_finite("loss"));
    }
    check_dim(queries.len(), adjoints.len())?;
    drop(outputs);
    let mut grad = ParamGradient::zeros_like(net);
    for ((q, adj), qc) in queries.iter().zip(&adjoints).zip(caches) {
        check_dim(q.len(), adj.len())?;
        check_dim(q.k, adj.k)?;
        let step = chunk_len(q.k);
        for (ci, cache) in qc.into_iter().enumerate() {
            let start = ci * step;
            let nb = step.min(q.len() - start);
            let cache = match cache {
                Some(c) => c,
                None => forward_chunk(net, q, start, nb, true).1.expect("stored cache"),
            };
            let bar = gather_adjoint(adj, q.k, start, nb);
            backward_chunk(net, &cache, q.k, nb, bar, &mut grad.data);
        }
    }
    if grad.data.iter().any(|g| !g.is_finite()) {
        return Err(non_finite("parameter gradient"));
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamWState {
    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_step(net: &mut MlpNetwork, grad: &ParamGradient, state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    if !grad.congruent_with(net) {
        return Err(Error::InvalidConfig("gradient shape does not match network".into()));
    }
    if grad.data.iter().any(|g| !g.is_finite()) {
        return Err(non_finite("gradient passed to optimizer"));
    }
    let n = net.num_params();
    if state.m.len() != n {
        if state.step != 0 {
            return Err(Error::DimensionMismatch { expected: n, got: state.m.len() });
        }
        state.m = vec![0.0; n];
        state.v = vec![0.0; n];
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (((p, &g), m), v) in net.params.iter_mut().zip(&grad.data).zip(&mut state.m).zip(&mut state.v) {
        *p *= 1.0 - cfg.lr * cfg.weight_decay;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    #[serde(rename = "W")]
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Deserialize)]
struct ModelFile {
    format_version: u32,
    input_dim: usize,
    depth: usize,
    width: usize,
    activation: String,
    layers: Vec<LayerFile>,
}

fn push_array(out: &mut String, vals: &[f64]) {
    out.push('[');
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&format!("{v:.16e}"));
    }
    out.push(']');
}

impl MlpNetwork {
    /// Serializes to the JSON model document; numbers carry 17 significant
    /// digits so parsing restores every bit.
    pub fn to_model_string(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{{\n  \"format_version\": {FORMAT_VERSION},\n  \"input_dim\": {},\n  \"depth\": {},\n  \"width\": {},\n  \"activation\": \"tanh\",\n  \"layers\": [\n",
            self.input_dim, self.depth, self.width
        ));
        for (l, sh) in self.shapes.iter().enumerate() {
            s.push_str(&format!("    {{\"rows\": {}, \"cols\": {}, \"W\": ", sh.rows, sh.cols));
            push_array(&mut s, self.weights(l));
            s.push_str(", \"b\": ");
            push_array(&mut s, self.bias(l));
            s.push('}');
            s.push_str(if l == self.depth { "\n" } else { ",\n" });
        }
        s.push_str("  ]\n}\n");
        s
    }

    pub fn from_model_str(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if f.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported format_version {}", f.format_version)));
        }
        if f.activation != "tanh" {
            return Err(Error::Parse(format!("unsupported activation `{}`", f.activation)));
        }
        if f.layers.len() != f.depth + 1 {
            return Err(Error::Parse(format!("expected {} layers, found {}", f.depth + 1, f.layers.len())));
        }
        let (shapes, _) = layout(f.input_dim, f.depth, f.width);
        for (s, lf) in shapes.iter().zip(&f.layers) {
            if s.rows != lf.rows || s.cols != lf.cols {
                return Err(Error::Parse(format!(
                    "layer shape {}x{} does not chain (expected {}x{})",
                    lf.rows, lf.cols, s.rows, s.cols
                )));
            }
        }
        let layers: Vec<(Vec<f64>, Vec<f64>)> = f.layers.into_iter().map(|l| (l.w, l.b)).collect();
        Self::from_layers(f.input_dim, &layers)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_model_string())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_model_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-s..s)).collect()
    }

    #[test]
    fn fast_tanh_matches_libm() {
        let xs: Vec<f64> = (0..400_001).map(|i| (i as f64 - 200_000.0) * 1e-4).chain([1e-300, -1e-12, 0.55, 800.0, -f64::INFINITY]).collect();
        let mut out = vec![0.0; xs.len()];
        tanh_slice(&xs, &mut out);
        for (x, t) in xs.iter().zip(&out) {
            let e = x.tanh();
            assert!((t - e).abs() <= 1e-15 * e.abs(), "{x}: {t} vs {e}");
            assert_eq!(*t, tanh_scalar(*x));
        }
        assert_eq!(tanh_scalar(0.0), 0.0);
    }

    #[test]
    fn packed_index_is_dense_and_ordered() {
        for k in 0..6 {
            let mut seen = Vec::new();
            for a in 0..k {
                for b in a..k {
                    seen.push(hess_index(k, a, b));
                    assert_eq!(hess_index(k, a, b), hess_index(k, b, a));
                }
            }
            assert_eq!(seen, (0..k * (k + 1) / 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn layer_shapes_chain() {
        let n = MlpNetwork::init(3, 2, 40, 7).unwrap();
        let s: Vec<_> = n.shapes().iter().map(|s| (s.rows, s.cols)).collect();
        assert_eq!(s, vec![(40, 3), (40, 40), (1, 40)]);
        let n = MlpNetwork::init(5, 6, 40, 7).unwrap();
        assert_eq!(n.shapes().len(), 7);
        assert_eq!((n.shapes()[0].rows, n.shapes()[0].cols), (40, 5));
        assert!(n.shapes()[1..6].iter().all(|s| s.rows == 40 && s.cols == 40));
        assert_eq!((n.shapes()[6].rows, n.shapes()[6].cols), (1, 40));
        assert!(MlpNetwork::init(0, 2, 4, 0).is_err());
        assert!(MlpNetwork::init(3, 0, 4, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = MlpNetwork::init(3, 2, 16, 42).unwrap();
        let b = MlpNetwork::init(3, 2, 16, 42).unwrap();
        assert_eq!(a, b);
        for l in 0..3 {
            assert!(a.bias(l).iter().all(|&v| v == 0.0));
            let bound = 1.0 / (a.shapes()[l].cols as f64).sqrt();
            assert!(a.weights(l).iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn hand_evaluated_two_unit_network() {
        let net = MlpNetwork::from_layers(2, &[(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]), (vec![1.0, 1.0], vec![0.0])]).unwrap();
        let x = [0.3, -1.1];
        let expect = 0.3f64.tanh() + (-1.1f64).tanh();
        assert!((net.forward(&x).unwrap() - expect).abs() < 1e-15);
        let zero = MlpNetwork::from_layers(2, &[(vec![0.0; 4], vec![0.5, 0.1]), (vec![0.0; 2], vec![0.25])]).unwrap();
        assert_eq!(zero.forward(&x).unwrap(), 0.25);
    }

    #[test]
    fn forward_rejects_bad_dimension() {
        let net = MlpNetwork::init(3, 1, 4, 0).unwrap();
        assert!(matches!(net.forward(&[0.0; 2]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn jets_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let n = 3 + trial % 3;
            let net = MlpNetwork::init(n, 1 + trial % 3, 6 + trial, trial as u64).unwrap();
            let x = rand_vec(&mut rng, n, 1.0);
            let jet = net.forward_jet2(&x).unwrap();
            assert!((jet.value - net.forward(&x).unwrap()).abs() < 1e-14);
            let h = 1e-5;
            for i in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (net.forward(&xp).unwrap() - net.forward(&xm).unwrap()) / (2.0 * h);
                assert!((fd - jet.grad[i]).abs() <= 1e-6 * jet.grad[i].abs().max(1e-2), "grad {i}");
                let gp = net.forward_jet2(&xp).unwrap();
                let gm = net.forward_jet2(&xm).unwrap();
                for j in 0..n {
                    let fd2 = (gp.grad[j] - gm.grad[j]) / (2.0 * h);
                    assert!((fd2 - jet.hess(i, j)).abs() <= 1e-5 * jet.hess(i, j).abs().max(1e-2));
                }
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = MlpNetwork::init(3, 2, 8, 5).unwrap();
        // nonzero biases exercise every parameter
        for p in net.params_mut() {
            *p += rng.gen_range(-0.3..0.3);
        }
        let mut q1 = JetQuery::new(3, 2);
        let mut q2 = JetQuery::new(3, 0);
        for _ in 0..4 {
            let p = rand_vec(&mut rng, 3, 1.0);
            let s1 = rand_vec(&mut rng, 3, 1.0);
            let s2 = rand_vec(&mut rng, 3, 1.0);
            q1.push(&p, &[&s1, &s2]);
            q2.push(&p, &[]);
        }
        // loss mixing every component nonlinearly
        let eval = |o: &[JetBatch]| -> Result<(f64, Vec<JetBatch>)> {
            let (a, b) = (&o[0], &o[1]);
            let mut ga = JetBatch::zeros(2, a.len());
            let mut gb = JetBatch::zeros(0, b.len());
            let mut loss = 0.0;
            for i in 0..a.len() {
                let r = a.second(i, 0, 0) + 0.7 * a.second(i, 1, 1) - 0.3 * a.second(i, 0, 1) + a.first(i, 0) * a.first(i, 1) + a.value(i);
                loss += r * r;
                *ga.second_mut(i, 0, 0) += 2.0 * r;
                *ga.second_mut(i, 1, 1) += 1.4 * r;
                *ga.second_mut(i, 0, 1) -= 0.6 * r;
                *ga.first_mut(i, 0) += 2.0 * r * a.first(i, 1);
                *ga.first_mut(i, 1) += 2.0 * r * a.first(i, 0);
                *ga.value_mut(i) += 2.0 * r;
                let v = b.value(i);
                loss += v.powi(3);
                *gb.value_mut(i) += 3.0 * v * v;
            }
            Ok((loss, vec![ga, gb]))
        };
        let queries = [q1, q2];
        let (l0, g) = loss_param_grad(&net, &queries, eval).unwrap();
        let h = 1e-6;
        for p in 0..net.num_params() {
            let orig = net.params()[p];
            net.params_mut()[p] = orig + h;
            let lp = loss_param_grad(&net, &queries, eval).unwrap().0;
            net.params_mut()[p] = orig - h;
            let lm = loss_param_grad(&net, &queries, eval).unwrap().0;
            net.params_mut()[p] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.as_slice()[p];
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-1), "param {p}: fd {fd} vs {an}");
        }
        assert!(l0.is_finite());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let net = MlpNetwork::init(3, 1, 4, 0).unwrap();
        let mut q = JetQuery::new(3, 0);
        q.push(&[0.0; 3], &[]);
        let r = loss_param_grad(&net, &[q], |o| Ok((f64::NAN, vec![JetBatch::zeros(0, o[0].len())])));
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn adamw_hand_values() {
        let mut net = MlpNetwork::from_layers(1, &[(vec![0.5], vec![0.0]), (vec![2.0], vec![0.0])]).unwrap();
        let before = net.params().to_vec();
        let mut st = AdamWState::default();
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let zero = ParamGradient::zeros_like(&net);
        adamw_step(&mut net, &zero, &mut st, &cfg).unwrap();
        assert_eq!(net.params(), &before[..]);

        let mut net2 = net.clone();
        let mut g = ParamGradient::zeros_like(&net2);
        g.data[0] = 0.2;
        let mut st2 = AdamWState::default();
        adamw_step(&mut net2, &g, &mut st2, &cfg).unwrap();
        // m̂ = g, v̂ = g², step = lr * g / (|g| + eps)
        let expect = 0.5 - 0.1 * 0.2 / (0.2 + 1e-8);
        assert!((net2.params()[0] - expect).abs() < 1e-15);

        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut net3 = net.clone();
        adamw_step(&mut net3, &zero, &mut AdamWState::default(), &cfg).unwrap();
        for (a, b) in net3.params().iter().zip(&before) {
            assert_eq!(*a, b * (1.0 - 0.05));
        }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let mut net = MlpNetwork::init(5, 3, 7, 99).unwrap();
        net.params_mut()[3] = -0.0;
        net.params_mut()[4] = 1e-310;
        net.params_mut()[5] = std::f64::consts::PI;
        let text = net.to_model_string();
        let back = MlpNetwork::from_model_str(&text).unwrap();
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(MlpNetwork::from_model_str(&text.replace("tanh", "relu")).is_err());
    }
}
