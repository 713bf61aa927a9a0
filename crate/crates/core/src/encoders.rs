//! Text and image encoders.
//!
//! Both are small pre-norm transformer stacks with learned absolute
//! positions. The summary vector is the output at position 0: a `[CLS]`
//! token for text, a learned summary token for images.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::data::ImageGrid;
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, TransformerLayer};
use crate::params::{ParamId, ParamStore, Tensor};
use crate::vocab::{TagVocab, CLS};

#[derive(Clone, Debug)]
pub struct TextEncoder {
    token_embedding: ParamId,
    position_embedding: ParamId,
    layers: Vec<TransformerLayer>,
    ln_final: LayerNorm,
    vocab_size: usize,
    max_seq_len: usize,
    dim: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        max_seq_len: usize,
        dim: usize,
        layers: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        let token_embedding = store.normal(format!("{name}.tok"), vocab_size, dim, 1.0, rng);
        let position_embedding = store.normal(format!("{name}.pos"), max_seq_len + 1, dim, 0.1, rng);
        // A random summary row adds the same offset to every sequence, which
        // drowns the content early in training; start it at zero instead.
        store.get_mut(token_embedding).row_mut(CLS).fill(0.0);
        let layers = (0..layers)
            .map(|l| TransformerLayer::new(store, &format!("{name}.l{l}"), dim, ffn_dim, rng))
            .collect();
        Self {
            token_embedding,
            position_embedding,
            layers,
            ln_final: LayerNorm::new(store, &format!("{name}.lnf"), dim),
            vocab_size,
            max_seq_len,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    fn check(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.max_seq_len
            )));
        }
        match tokens.iter().find(|&&t| t >= self.vocab_size) {
            Some(&t) => Err(Error::UnknownToken(t)),
            None => Ok(()),
        }
    }

    /// Every position's output, `(1 + |tokens|) × D`; row 0 is `[CLS]`.
    pub fn forward_sequence(&self, g: &mut Graph, tokens: &[usize]) -> Result<NodeId> {
        self.check(tokens)?;
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(CLS);
        ids.extend_from_slice(tokens);
        let table = g.param(self.token_embedding);
        let x = g.gather(table, &ids);
        let pos_table = g.param(self.position_embedding);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather(pos_table, &positions);
        let h = g.add(x, pos);
        let mut h = g.dropout(h);
        for layer in &self.layers {
            h = layer.forward(g, h);
        }
        Ok(self.ln_final.forward(g, h))
    }

    /// Summary embedding, `1×D`.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize]) -> Result<NodeId> {
        let seq = self.forward_sequence(g, tokens)?;
        Ok(g.row(seq, 0))
    }

    pub fn encode_text(&self, store: &ParamStore, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, tokens)?;
        Ok(g.value(out).iter().copied().collect())
    }

    /// A tag is encoded exactly like any text: through its token sequence.
    pub fn encode_tag(&self, store: &ParamStore, tags: &TagVocab, tag: usize) -> Result<Vec<f64>> {
        self.encode_text(store, tags.tokens_of(tag)?)
    }
}

#[derive(Clone, Debug)]
pub struct ImageBackbone {
    patch_projection: Linear,
    summary_token: ParamId,
    position_embedding: ParamId,
    layers: Vec<TransformerLayer>,
    ln_final: LayerNorm,
    grid_size: usize,
    channels: usize,
    patch: usize,
    dim: usize,
}

impl ImageBackbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        grid_size: usize,
        channels: usize,
        patch: usize,
        dim: usize,
        layers: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if patch == 0 || grid_size % patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {patch} does not divide grid size {grid_size}"
            )));
        }
        let n_patches = (grid_size / patch) * (grid_size / patch);
        let patch_dim = patch * patch * channels;
        let patch_projection = Linear::new(store, &format!("{name}.patch"), patch_dim, dim, false, rng);
        let summary_token = store.zeros(format!("{name}.summary"), 1, dim);
        let position_embedding = store.normal(format!("{name}.pos"), n_patches + 1, dim, 0.1, rng);
        let layers = (0..layers)
            .map(|l| TransformerLayer::new(store, &format!("{name}.l{l}"), dim, ffn_dim, rng))
            .collect();
        Ok(Self {
            patch_projection,
            summary_token,
            position_embedding,
            layers,
            ln_final: LayerNorm::new(store, &format!("{name}.lnf"), dim),
            grid_size,
            channels,
            patch,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_count(&self) -> usize {
        (self.grid_size / self.patch).pow(2)
    }

    pub fn patch_projection(&self) -> &Linear {
        &self.patch_projection
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.grid_size, self.channels)
    }

    /// Flat grid index of element `j` of patch `p`.
    pub fn patch_cell(&self, p: usize, j: usize) -> usize {
        let per_side = self.grid_size / self.patch;
        let (pr, pc) = (p / per_side, p % per_side);
        let ch = j % self.channels;
        let within = j / self.channels;
        let (r, c) = (within / self.patch, within % self.patch);
        ((pr * self.patch + r) * self.grid_size + pc * self.patch + c) * self.channels + ch
    }

    /// Patch matrix of a flat `G·G·C` value slice.
    pub fn patchify_values(&self, values: &[f64]) -> Tensor {
        let patch_dim = self.patch * self.patch * self.channels;
        Tensor::from_shape_fn((self.patch_count(), patch_dim), |(p, j)| values[self.patch_cell(p, j)])
    }

    /// `(G/P)² × P²C` matrix of flattened patches in row-major patch order.
    pub fn patchify(&self, img: &ImageGrid) -> Result<Tensor> {
        if (img.size, img.channels) != (self.grid_size, self.channels) {
            return Err(Error::ShapeMismatch {
                what: format!("image {}", img.source_id),
                expected: vec![self.grid_size, self.grid_size, self.channels],
                found: vec![img.size, img.size, img.channels],
            });
        }
        let values: Vec<f64> = img.values.iter().map(|&v| v as f64).collect();
        Ok(self.patchify_values(&values))
    }

    /// Summary embedding from a patch matrix node.
    pub fn forward_patches(&self, g: &mut Graph, patches: NodeId) -> NodeId {
        let tokens = self.patch_projection.forward(g, patches);
        let summary = g.param(self.summary_token);
        let seq = g.concat_rows(&[summary, tokens]);
        let pos = g.param(self.position_embedding);
        let h = g.add(seq, pos);
        let mut h = g.dropout(h);
        for layer in &self.layers {
            h = layer.forward(g, h);
        }
        let h = self.ln_final.forward(g, h);
        g.row(h, 0)
    }

    pub fn forward(&self, g: &mut Graph, img: &ImageGrid) -> Result<NodeId> {
        let patches = g.constant(self.patchify(img)?);
        Ok(self.forward_patches(g, patches))
    }

    pub fn encode_image(&self, store: &ParamStore, img: &ImageGrid) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, img)?;
        Ok(g.value(out).iter().copied().collect())
    }
}
