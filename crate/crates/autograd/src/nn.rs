//! Layers built on the tape: linear maps, multi-head attention, transformer blocks and
//! an LSTM cell. Layers only hold [`ParamId`]s; values live in a [`ParamStore`].

use crate::{Graph, Matrix, ParamId, ParamStore, Var};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

const LN_EPS: f64 = 1e-5;

/// Glorot-uniform initialised matrix.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Uniform::new_inclusive(-bound, bound);
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Fixed sinusoidal encoding of (possibly fractional) positions, one row per position.
pub fn sinusoidal_encoding(positions: &[f64], dim: usize) -> Matrix {
    Matrix::from_fn(positions.len(), dim, |r, c| {
        let pair = (c / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        let angle = positions[r] * freq;
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(in_dim, out_dim, rng));
        let bias = Some(store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim)));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(in_dim, out_dim, rng));
        Self { weight, bias: None, in_dim, out_dim }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Dense scaled dot-product attention split over `heads`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "model width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `query` is Lq×dim; `key` and `value` are Lk×dim.
    pub fn forward(&self, g: &mut Graph, query: Var, key: Var, value: Var) -> Var {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, key);
        let v = self.v.forward(g, value);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores);
            outs.push(g.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, joined)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// Post-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let a = self.attn.forward(g, x, x, x);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        self.norm2.forward(g, x)
    }
}

/// Post-norm transformer decoder block: self-attention over queries, cross-attention
/// into `memory`, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        }
    }

    /// `query_pos` is added to the queries and `memory_pos` to the keys, as in
    /// detection transformers; values carry content only.
    pub fn forward(&self, g: &mut Graph, x: Var, query_pos: Var, memory: Var, memory_pos: Var) -> Var {
        let qk = g.add(x, query_pos);
        let a = self.self_attn.forward(g, qk, qk, x);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let q = g.add(x, query_pos);
        let k = g.add(memory, memory_pos);
        let c = self.cross_attn.forward(g, q, k, memory);
        let x = g.add(x, c);
        let x = self.norm2.forward(g, x);
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        self.norm3.forward(g, x)
    }
}

/// Lookup table of learned row vectors.
#[derive(Clone, Debug)]
pub struct Embedding {
    table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let table = store.add(format!("{name}.table"), uniform(count, dim, 0.5, rng));
        Self { table, dim }
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

/// Single LSTM cell over a batch of rows: gates come from one affine map of `[x, h]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    gates: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let gates = Linear::new(store, &format!("{name}.gates"), input + hidden, 4 * hidden, rng);
        // Forget-gate bias of one keeps early gradients alive.
        if let Some(b) = gates.bias() {
            let bias = store.value_mut(b);
            for c in hidden..2 * hidden {
                bias.set(0, c, 1.0);
            }
        }
        Self { gates, hidden }
    }

    /// One step: returns the new `(h, c)`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> (Var, Var) {
        let xh = g.concat_cols(&[x, h]);
        let z = self.gates.forward(g, xh);
        let n = self.hidden;
        let i = g.slice_cols(z, 0, n);
        let f = g.slice_cols(z, n, n);
        let u = g.slice_cols(z, 2 * n, n);
        let o = g.slice_cols(z, 3 * n, n);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let u = g.tanh(u);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let iu = g.mul(i, u);
        let c = g.add(fc, iu);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        (h, c)
    }
}
