//! Building blocks: linear maps, layer norm, single-head attention,
//! pre-norm transformer layers and a cross-attention block.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Uniform `±1/√input` initialisation.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self::with_bound(store, name, input, output, bias, bound, rng)
    }

    pub fn with_bound<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.uniform(format!("{name}.w"), input, output, bound, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.b"), 1, output));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        let weight = store.zeros(format!("{name}.w"), input, output);
        let bias = Some(store.zeros(format!("{name}.b"), 1, output));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
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
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.g"), 1, dim),
            bias: store.zeros(format!("{name}.b"), 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let n = g.mul_row(n, gain);
        g.add_row(n, bias)
    }
}

/// Single-head scaled dot-product attention with output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            dim,
        }
    }

    /// `queries` is `n×D`, `memory` is `m×D`; returns `n×D`.
    pub fn forward(&self, g: &mut Graph, queries: NodeId, memory: NodeId) -> NodeId {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let weights = g.softmax(scores);
        let mixed = g.matmul(weights, v);
        self.out.forward(g, mixed)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, ffn_dim: usize, rng: &mut R) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let n = self.ln_attn.forward(g, x);
        let a = self.attn.forward(g, n, n);
        let a = g.dropout(a);
        let x = g.add(x, a);
        let n = self.ln_ffn.forward(g, x);
        let f = self.ffn.forward(g, n);
        let f = g.dropout(f);
        g.add(x, f)
    }
}

/// Refines a query sequence in terms of a memory sequence: cross-attention
/// followed by a feed-forward layer, both residual and pre-normed.
///
/// A learned null token is appended to the memory, so each query splits its
/// attention between the memory and the null slot. With a one-token memory
/// that split is the only place where query and memory interact
/// multiplicatively.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    null: ParamId,
    ln_query: LayerNorm,
    ln_memory: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
    ln_out: LayerNorm,
}

impl CrossAttentionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, ffn_dim: usize, rng: &mut R) -> Self {
        Self {
            null: store.normal(format!("{name}.null"), 1, dim, 1.0, rng),
            ln_query: LayerNorm::new(store, &format!("{name}.lnq"), dim),
            ln_memory: LayerNorm::new(store, &format!("{name}.lnm"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.lnf"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng),
            ln_out: LayerNorm::new(store, &format!("{name}.lno"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, query: NodeId, memory: NodeId) -> NodeId {
        let q = self.ln_query.forward(g, query);
        let null = g.param(self.null);
        let memory = g.concat_rows(&[memory, null]);
        let m = self.ln_memory.forward(g, memory);
        let a = self.attn.forward(g, q, m);
        let a = g.dropout(a);
        let h = g.add(query, a);
        let n = self.ln_ffn.forward(g, h);
        let f = self.ffn.forward(g, n);
        let f = g.dropout(f);
        let h = g.add(h, f);
        self.ln_out.forward(g, h)
    }
}
