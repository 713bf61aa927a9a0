//! Minimal reverse-mode automatic differentiation over row-major 2-D
//! tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! pulled in lazily from a borrowed [`ParamStore`] and cached, so a parameter
//! used many times in one pass is a single leaf. [`Graph::backward`] returns
//! gradients keyed by parameter id. Frozen parameters enter as constants.

use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::params::{Gradients, ParamId, ParamStore, Tensor};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// One row of a softmax cross-entropy term.
#[derive(Clone, Debug, PartialEq)]
pub struct CeRow {
    /// Row of the logits matrix.
    pub row: usize,
    /// Columns competing in the softmax; `None` means every column.
    pub candidates: Option<Vec<usize>>,
    /// Gold column. Must be one of the candidates.
    pub target: usize,
    pub weight: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Var(usize),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sum(Vec<NodeId>),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: NodeId,
    },
    L2Normalize {
        x: NodeId,
        norms: Vec<f64>,
    },
    Gather(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    Transpose(NodeId),
    SumRows(NodeId),
    VladResidual {
        v: NodeId,
        alpha: NodeId,
        centroids: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        rows: Vec<CeRow>,
        probs: Vec<Vec<(usize, f64)>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    vars: usize,
    dropout: Option<(f64, SeededRng)>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            vars: 0,
            dropout: None,
        }
    }

    /// A training graph whose [`Graph::dropout`] zeroes each entry with
    /// probability `rate`, drawing masks from `rng`.
    pub fn with_dropout(store: &'p ParamStore, rate: f64, rng: SeededRng) -> Self {
        Self {
            dropout: Some((rate, rng)),
            ..Self::new(store)
        }
    }

    /// Hands the mask generator back so the next graph continues its stream.
    pub fn take_dropout_rng(&mut self) -> Option<SeededRng> {
        self.dropout.take().map(|(_, rng)| rng)
    }

    /// Inverted dropout; the identity unless built with [`Graph::with_dropout`].
    pub fn dropout(&mut self, x: NodeId) -> NodeId {
        let dim = self.value(x).dim();
        let mask = match self.dropout.as_mut() {
            Some((rate, rng)) if *rate > 0.0 => {
                let keep = 1.0 - *rate;
                Tensor::from_shape_fn(dim, |_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
            }
            _ => return x,
        };
        let m = self.constant(mask);
        self.mul(x, m)
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn row_vector(&mut self, values: &[f64]) -> NodeId {
        let t = Tensor::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.constant(t)
    }

    /// A differentiable input that is not a parameter. Its gradient is
    /// reported by [`Gradients::var`] under the returned index.
    pub fn variable(&mut self, value: Tensor) -> (NodeId, usize) {
        let idx = self.vars;
        self.vars += 1;
        (self.push(value, Op::Var(idx)), idx)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let value = self.store.get(id).clone();
        let op = if self.store.is_trainable(id) {
            Op::Param(id)
        } else {
            Op::Leaf
        };
        let n = self.push(value, op);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Sums same-shaped nodes.
    pub fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "sum of nothing");
        let mut v = self.value(xs[0]).clone();
        for x in &xs[1..] {
            assert_eq!(v.dim(), self.shape(*x), "sum shape");
            v += self.value(*x);
        }
        self.push(v, Op::Sum(xs.to_vec()))
    }

    /// `a + 1·row`, broadcasting a `1×n` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row width");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row width");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise layer normalization without affine terms.
    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut normed = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let v = normed.clone();
        self.push(v, Op::LayerNorm { x, normed, inv_std })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::Softmax { x })
    }

    /// Row-wise L2 normalization.
    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = (row.iter().map(|a| a * a).sum::<f64>() + 1e-12).sqrt();
            row.mapv_inplace(|a| a / n);
            norms.push(n);
        }
        self.push(v, Op::L2Normalize { x, norms })
    }

    /// Selects rows by index (embedding lookup).
    pub fn gather(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let src = self.value(x);
        let v = src.select(Axis(0), rows);
        self.push(v, Op::Gather(x, rows.to_vec()))
    }

    pub fn row(&mut self, x: NodeId, r: usize) -> NodeId {
        self.gather(x, &[r])
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> NodeId {
        let views: Vec<_> = xs.iter().map(|x| self.value(*x).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows width");
        self.push(v, Op::ConcatRows(xs.to_vec()))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let src = self.value(x);
        assert_eq!(src.len(), rows * cols, "reshape size");
        let data: Vec<f64> = src.iter().copied().collect();
        let v = Tensor::from_shape_vec((rows, cols), data).expect("reshape");
        self.push(v, Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).t().to_owned();
        self.push(v, Op::Transpose(x))
    }

    /// Column sums as a `1×n` row.
    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(x))
    }

    /// NeXtVLAD-style residual block: `out[i][k] = alpha[k] · (v[i] − c[k])`
    /// for a `1×D` embedding, `1×K` assignment and `1×K` scalar centroids.
    pub fn vlad_residual(&mut self, v: NodeId, alpha: NodeId, centroids: NodeId) -> NodeId {
        let (vr, d) = self.shape(v);
        let (ar, k) = self.shape(alpha);
        assert_eq!((vr, ar), (1, 1));
        assert_eq!(self.shape(centroids), (1, k));
        let vv = self.value(v);
        let av = self.value(alpha);
        let cv = self.value(centroids);
        let out = Tensor::from_shape_fn((d, k), |(i, kk)| {
            av[[0, kk]] * (vv[[0, i]] - cv[[0, kk]])
        });
        self.push(
            out,
            Op::VladResidual {
                v,
                alpha,
                centroids,
            },
        )
    }

    /// Weighted sum of softmax cross-entropies, one per [`CeRow`].
    pub fn cross_entropy(&mut self, logits: NodeId, rows: Vec<CeRow>) -> NodeId {
        let z = self.value(logits);
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(rows.len());
        for r in &rows {
            let cands: Vec<usize> = match &r.candidates {
                Some(c) => c.clone(),
                None => (0..z.ncols()).collect(),
            };
            assert!(cands.contains(&r.target), "target outside candidates");
            let max = cands
                .iter()
                .map(|&c| z[[r.row, c]])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = cands.iter().map(|&c| (z[[r.row, c]] - max).exp()).sum();
            let lse = max + sum.ln();
            total += r.weight * (lse - z[[r.row, r.target]]);
            probs.push(
                cands
                    .iter()
                    .map(|&c| (c, (z[[r.row, c]] - lse).exp()))
                    .collect(),
            );
        }
        let v = Tensor::from_elem((1, 1), total);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                rows,
                probs,
            },
        )
    }

    /// Reverse pass from a `1×1` node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones((1, 1)));
        let mut out = Gradients::new(self.store.len());
        out.reserve_vars(self.vars);

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => out.accumulate(*pid, &g),
                Op::Var(i) => out.accumulate_var(*i, &g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sum(xs) => {
                    for x in xs {
                        acc(&mut grads, *x, g.clone());
                    }
                }
                Op::AddRow(a, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulRow(a, r) => {
                    let ga = &g * self.value(*r);
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *r, gr);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::Gelu(a) => {
                    let ga = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|g, x| g * gelu_grad(*x));
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, normed, inv_std } => {
                    let cols = normed.ncols() as f64;
                    let mut gx = g.clone();
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let y = normed.row(r);
                        let mean_g = row.sum() / cols;
                        let mean_gy = row.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        let inv = inv_std[r];
                        for (gi, yi) in row.iter_mut().zip(y.iter()) {
                            *gi = inv * (*gi - mean_g - yi * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let mut gx = &g * y;
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let dot: f64 = row.sum();
                        let yr = y.row(r);
                        for (gi, yi) in row.iter_mut().zip(yr.iter()) {
                            *gi -= yi * dot;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let dot: f64 = row.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        for (gi, yi) in row.iter_mut().zip(yr.iter()) {
                            *gi = (*gi - yi * dot) / norms[r];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gather(x, rows) => {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(xs) => {
                    let mut start = 0;
                    for x in xs {
                        let n = self.shape(*x).0;
                        acc(&mut grads, *x, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::Reshape(x) => {
                    let (r, c) = self.shape(*x);
                    let data: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *x, Tensor::from_shape_vec((r, c), data).expect("reshape"));
                }
                Op::Transpose(x) => acc(&mut grads, *x, g.t().to_owned()),
                Op::SumRows(x) => {
                    let (r, c) = self.shape(*x);
                    let gx = g.broadcast((r, c)).expect("broadcast").to_owned();
                    acc(&mut grads, *x, gx);
                }
                Op::VladResidual {
                    v,
                    alpha,
                    centroids,
                } => {
                    let vv = self.value(*v);
                    let av = self.value(*alpha);
                    let cv = self.value(*centroids);
                    let (d, k) = g.dim();
                    let mut gv = Tensor::zeros((1, d));
                    let mut ga = Tensor::zeros((1, k));
                    let mut gc = Tensor::zeros((1, k));
                    for i in 0..d {
                        for kk in 0..k {
                            let gi = g[[i, kk]];
                            gv[[0, i]] += gi * av[[0, kk]];
                            ga[[0, kk]] += gi * (vv[[0, i]] - cv[[0, kk]]);
                            gc[[0, kk]] -= gi * av[[0, kk]];
                        }
                    }
                    acc(&mut grads, *v, gv);
                    acc(&mut grads, *alpha, ga);
                    acc(&mut grads, *centroids, gc);
                }
                Op::CrossEntropy {
                    logits,
                    rows,
                    probs,
                } => {
                    let scale = g[[0, 0]];
                    let mut gz = Tensor::zeros(self.shape(*logits));
                    for (r, p) in rows.iter().zip(probs) {
                        for &(c, pc) in p {
                            gz[[r.row, c]] += scale * r.weight * pc;
                        }
                        gz[[r.row, r.target]] -= scale * r.weight;
                    }
                    acc(&mut grads, *logits, gz);
                }
            }
        }
        out
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn row_tensor(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row")
}
