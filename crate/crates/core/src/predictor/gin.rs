//! Two-layer GIN encoder with global mean pooling, plus the two heads, as
//! plain dense loops over a flat parameter vector.
//!
//! Layer: `h' = relu(W2 · relu(W1 · ((1 + eps) h_v + sum_{u in N(v)} h_u) + b1) + b2)`
//! with `eps = 0`. `N(v)` includes the self-loop, so a node's own features
//! are counted twice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sysgraph::FEATURE_DIM;

pub const EPSILON: f64 = 0.0;

/// Named parameter blocks in storage order.
pub const BLOCKS: [&str; 11] = [
    "gin1.w1", "gin1.b1", "gin1.w2", "gin1.b2", "gin2.w1", "gin2.b1", "gin2.w2", "gin2.b2",
    "throughput.w", "throughput.b", "relative.w",
];

/// Sizes of each block for a given input and hidden width.
pub fn block_sizes(input: usize, hidden: usize) -> [usize; 11] {
    let h = hidden;
    [input * h, h, h * h, h, h * h, h, h * h, h, h, 1, h]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub input: usize,
    pub hidden: usize,
    pub data: Vec<f64>,
    offsets: [usize; 12],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Gin1W1 = 0,
    Gin1B1,
    Gin1W2,
    Gin1B2,
    Gin2W1,
    Gin2B1,
    Gin2W2,
    Gin2B2,
    ThroughputW,
    ThroughputB,
    RelativeW,
}

impl Params {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let sizes = block_sizes(input, hidden);
        let mut offsets = [0; 12];
        for (i, s) in sizes.iter().enumerate() {
            offsets[i + 1] = offsets[i] + s;
        }
        Self {
            input,
            hidden,
            data: vec![0.0; offsets[11]],
            offsets,
        }
    }

    pub fn from_data(input: usize, hidden: usize, data: Vec<f64>) -> Option<Self> {
        let mut p = Self::zeros(input, hidden);
        if data.len() != p.data.len() {
            return None;
        }
        p.data = data;
        Some(p)
    }

    /// He-uniform weights, zero biases.
    pub fn random(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(input, hidden);
        let fan_in = [
            (Block::Gin1W1, input),
            (Block::Gin1W2, hidden),
            (Block::Gin2W1, hidden),
            (Block::Gin2W2, hidden),
            (Block::ThroughputW, hidden),
            (Block::RelativeW, hidden),
        ];
        for (block, fan) in fan_in {
            let bound = (6.0 / fan as f64).sqrt();
            let bound = if matches!(block, Block::ThroughputW | Block::RelativeW) {
                bound * 0.1
            } else {
                bound
            };
            for w in p.block_mut(block) {
                *w = rng.random_range(-bound..=bound);
            }
        }
        p
    }

    pub fn range(&self, block: Block) -> std::ops::Range<usize> {
        let i = block as usize;
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn block(&self, block: Block) -> &[f64] {
        &self.data[self.range(block)]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        let r = self.range(block);
        &mut self.data[r]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A graph prepared for repeated forward passes.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub nodes: usize,
    pub in_neighbors: Vec<Vec<usize>>,
    /// Row-major `nodes x FEATURE_DIM`.
    pub x: Vec<f64>,
}

impl GraphInput {
    pub fn new(in_neighbors: Vec<Vec<usize>>, rows: &[[f64; FEATURE_DIM]]) -> Self {
        Self {
            nodes: rows.len(),
            in_neighbors,
            x: rows.iter().flatten().copied().collect(),
        }
    }
}

fn aggregate(h: &[f64], dim: usize, adj: &[Vec<usize>]) -> Vec<f64> {
    let mut out = vec![0.0; h.len()];
    for (v, nbrs) in adj.iter().enumerate() {
        let dst = &mut out[v * dim..(v + 1) * dim];
        for (o, x) in dst.iter_mut().zip(&h[v * dim..(v + 1) * dim]) {
            *o = (1.0 + EPSILON) * x;
        }
        for &u in nbrs {
            for (o, x) in dst.iter_mut().zip(&h[u * dim..(u + 1) * dim]) {
                *o += x;
            }
        }
    }
    out
}

fn aggregate_backward(d_agg: &[f64], dim: usize, adj: &[Vec<usize>]) -> Vec<f64> {
    let mut dh = vec![0.0; d_agg.len()];
    for (v, nbrs) in adj.iter().enumerate() {
        let g = &d_agg[v * dim..(v + 1) * dim];
        for (o, x) in dh[v * dim..(v + 1) * dim].iter_mut().zip(g) {
            *o += (1.0 + EPSILON) * x;
        }
        for &u in nbrs {
            for (o, x) in dh[u * dim..(u + 1) * dim].iter_mut().zip(g) {
                *o += x;
            }
        }
    }
    dh
}

/// `x (n x din) · w (din x dout) + b`
fn affine(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dout);
    for r in 0..n {
        out.extend_from_slice(b);
        let row = &mut out[r * dout..(r + 1) * dout];
        for (k, &xk) in x[r * din..(r + 1) * din].iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            for (o, wk) in row.iter_mut().zip(&w[k * dout..(k + 1) * dout]) {
                *o += xk * wk;
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_dx`.
#[allow(clippy::too_many_arguments)]
fn affine_backward(
    x: &[f64],
    n: usize,
    din: usize,
    w: &[f64],
    dout_rows: &[f64],
    dout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    let mut dx = if want_dx { vec![0.0; n * din] } else { Vec::new() };
    for r in 0..n {
        let g = &dout_rows[r * dout..(r + 1) * dout];
        for (b, gi) in db.iter_mut().zip(g) {
            *b += gi;
        }
        let xr = &x[r * din..(r + 1) * din];
        for k in 0..din {
            let wk = &w[k * dout..(k + 1) * dout];
            if xr[k] != 0.0 {
                for (d, gi) in dw[k * dout..(k + 1) * dout].iter_mut().zip(g) {
                    *d += xr[k] * gi;
                }
            }
            if want_dx {
                dx[r * din + k] = wk.iter().zip(g).map(|(a, b)| a * b).sum();
            }
        }
    }
    dx
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    agg: Vec<f64>,
    z1: Vec<f64>,
    r1: Vec<f64>,
    z2: Vec<f64>,
    out: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    l1: LayerCache,
    l2: LayerCache,
    pub embedding: Vec<f64>,
}

fn layer_forward(
    p: &Params,
    blocks: [Block; 4],
    h: &[f64],
    din: usize,
    g: &GraphInput,
) -> LayerCache {
    let hidden = p.hidden;
    let agg = aggregate(h, din, &g.in_neighbors);
    let z1 = affine(&agg, g.nodes, din, p.block(blocks[0]), p.block(blocks[1]), hidden);
    let r1 = relu(&z1);
    let z2 = affine(&r1, g.nodes, hidden, p.block(blocks[2]), p.block(blocks[3]), hidden);
    let out = relu(&z2);
    LayerCache { agg, z1, r1, z2, out }
}

pub fn forward(p: &Params, g: &GraphInput) -> Forward {
    use Block::*;
    let l1 = layer_forward(p, [Gin1W1, Gin1B1, Gin1W2, Gin1B2], &g.x, p.input, g);
    let l2 = layer_forward(p, [Gin2W1, Gin2B1, Gin2W2, Gin2B2], &l1.out, p.hidden, g);
    let h = p.hidden;
    let mut embedding = vec![0.0; h];
    for r in 0..g.nodes {
        for (e, x) in embedding.iter_mut().zip(&l2.out[r * h..(r + 1) * h]) {
            *e += x;
        }
    }
    let inv = 1.0 / g.nodes.max(1) as f64;
    embedding.iter_mut().for_each(|e| *e *= inv);
    Forward { l1, l2, embedding }
}

/// Returns the gradient w.r.t. the layer input when `want_dx`.
#[allow(clippy::too_many_arguments)]
fn layer_backward(
    p: &Params,
    grads: &mut [f64],
    blocks: [Block; 4],
    input: &[f64],
    din: usize,
    cache: &LayerCache,
    mut d_out: Vec<f64>,
    g: &GraphInput,
    want_dx: bool,
) -> Vec<f64> {
    let hidden = p.hidden;
    let n = g.nodes;
    let _ = input;
    relu_backward(&cache.z2, &mut d_out);
    let d_r1 = {
        let (dw, db) = split_two(grads, p.range(blocks[2]), p.range(blocks[3]));
        affine_backward(&cache.r1, n, hidden, p.block(blocks[2]), &d_out, hidden, dw, db, true)
    };
    let mut d_z1 = d_r1;
    relu_backward(&cache.z1, &mut d_z1);
    let d_agg = {
        let (dw, db) = split_two(grads, p.range(blocks[0]), p.range(blocks[1]));
        affine_backward(&cache.agg, n, din, p.block(blocks[0]), &d_z1, hidden, dw, db, want_dx)
    };
    if want_dx {
        aggregate_backward(&d_agg, din, &g.in_neighbors)
    } else {
        Vec::new()
    }
}

/// Disjoint mutable views of two adjacent-or-not ranges, first before second.
fn split_two(
    grads: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = grads.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}

/// Backpropagates `d_embedding` into the encoder gradient `grads`.
pub fn backward(p: &Params, g: &GraphInput, fwd: &Forward, d_embedding: &[f64], grads: &mut [f64]) {
    use Block::*;
    let h = p.hidden;
    let inv = 1.0 / g.nodes.max(1) as f64;
    let mut d_out2 = Vec::with_capacity(g.nodes * h);
    for _ in 0..g.nodes {
        d_out2.extend(d_embedding.iter().map(|d| d * inv));
    }
    let d_h1 = layer_backward(
        p,
        grads,
        [Gin2W1, Gin2B1, Gin2W2, Gin2B2],
        &fwd.l1.out,
        h,
        &fwd.l2,
        d_out2,
        g,
        true,
    );
    layer_backward(
        p,
        grads,
        [Gin1W1, Gin1B1, Gin1W2, Gin1B2],
        &g.x,
        p.input,
        &fwd.l1,
        d_h1,
        g,
        false,
    );
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `softplus^-1(y)`, used to start the throughput head near the target mean.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Throughput head pre-activation.
pub fn throughput_logit(p: &Params, embedding: &[f64]) -> f64 {
    dot(p.block(Block::ThroughputW), embedding) + p.block(Block::ThroughputB)[0]
}

/// Per-scheme score of the relative head.
pub fn relative_score(p: &Params, embedding: &[f64]) -> f64 {
    dot(p.block(Block::RelativeW), embedding)
}

/// Probability that the scheme scored `a` beats the one scored `b`: the first
/// entry of a softmax over `[a, b]`. Computed so that swapping the arguments
/// yields exactly `1 - p`.
pub fn pair_probability(a: f64, b: f64) -> f64 {
    let d = a - b;
    if d >= 0.0 {
        sigmoid(d)
    } else {
        1.0 - sigmoid(-d)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
