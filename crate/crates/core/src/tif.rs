//! Text-image fusion.
//!
//! Each coordinate of an embedding is a frame-level descriptor. A soft
//! assignment `α(v) = softmax(Wᵀv + b)` over `K` clusters gates the residual
//! of every descriptor against each cluster centroid, giving a `D×K` block
//! per embedding. Blocks are sum-pooled over a POI's embeddings of one
//! modality and linearly reduced to `H` dims. The two modality vectors are
//! then re-weighted by a two-token self-attention layer, flattened and
//! projected to the `D`-dim content embedding.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::config::{CentroidMode, Variant};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct ClusterBank {
    gate: Linear,
    centroids: ParamId,
    mode: CentroidMode,
    dim: usize,
    clusters: usize,
}

impl ClusterBank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        clusters: usize,
        mode: CentroidMode,
        rng: &mut R,
    ) -> Self {
        let gate = Linear::new(store, &format!("{name}.gate"), dim, clusters, true, rng);
        let centroids = match mode {
            CentroidMode::Scalar => store.normal(format!("{name}.centroids"), 1, clusters, 0.1, rng),
            CentroidMode::Vector => store.normal(format!("{name}.centroids"), clusters, dim, 0.1, rng),
        };
        Self {
            gate,
            centroids,
            mode,
            dim,
            clusters,
        }
    }

    pub fn gate(&self) -> &Linear {
        &self.gate
    }

    pub fn centroids(&self) -> ParamId {
        self.centroids
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn param_prefix_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.gate.weight, self.centroids];
        ids.extend(self.gate.bias);
        ids
    }

    fn check(&self, g: &Graph, emb: NodeId) -> Result<()> {
        let (r, c) = g.shape(emb);
        if r != 1 || c != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: c * r,
            });
        }
        Ok(())
    }

    /// Soft cluster proximities `α(v)`, `1×K`.
    pub fn assign(&self, g: &mut Graph, emb: NodeId) -> Result<NodeId> {
        self.check(g, emb)?;
        let logits = self.gate.forward(g, emb);
        Ok(g.softmax(logits))
    }

    /// Gated residuals `α_k(v)·(v_i − c_k)`, `D×K`.
    pub fn refine(&self, g: &mut Graph, emb: NodeId) -> Result<NodeId> {
        let alpha = self.assign(g, emb)?;
        let c = g.param(self.centroids);
        Ok(match self.mode {
            CentroidMode::Scalar => g.vlad_residual(emb, alpha, c),
            CentroidMode::Vector => {
                let vt = g.transpose(emb);
                let spread = g.matmul(vt, alpha);
                let ct = g.transpose(c);
                let gated = g.mul_row(ct, alpha);
                let neg = g.scale(gated, -1.0);
                g.add(spread, neg)
            }
        })
    }

    pub fn cluster_assign(&self, store: &ParamStore, emb: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let e = g.row_vector(emb);
        let a = self.assign(&mut g, e)?;
        Ok(g.value(a).iter().copied().collect())
    }

    pub fn refine_descriptors(&self, store: &ParamStore, emb: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let e = g.row_vector(emb);
        let r = self.refine(&mut g, e)?;
        Ok(g.value(r).clone())
    }
}

/// Cluster bank plus the `D·K → H` reduction for one modality.
#[derive(Clone, Debug)]
pub struct ModalityAggregator {
    bank: ClusterBank,
    reduction: Linear,
    dim: usize,
    clusters: usize,
}

impl ModalityAggregator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        clusters: usize,
        hidden: usize,
        mode: CentroidMode,
        rng: &mut R,
    ) -> Self {
        let bank = ClusterBank::new(store, &format!("{name}.bank"), dim, clusters, mode, rng);
        let gain = 1.0 / ((dim * clusters) as f64).sqrt();
        let reduction = Linear::with_bound(store, &format!("{name}.reduce"), dim * clusters, hidden, true, gain, rng);
        Self {
            bank,
            reduction,
            dim,
            clusters,
        }
    }

    pub fn bank(&self) -> &ClusterBank {
        &self.bank
    }

    /// Sum-pooled `D×K` block before reduction.
    pub fn pool(&self, g: &mut Graph, embeddings: &[NodeId]) -> Result<NodeId> {
        if embeddings.is_empty() {
            return Err(Error::Empty("modality embeddings"));
        }
        let blocks = embeddings
            .iter()
            .map(|&e| self.bank.refine(g, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(if blocks.len() == 1 { blocks[0] } else { g.sum(&blocks) })
    }

    /// Single `1×H` representation of a non-empty embedding list.
    pub fn aggregate(&self, g: &mut Graph, embeddings: &[NodeId]) -> Result<NodeId> {
        let pooled = self.pool(g, embeddings)?;
        let flat = g.reshape(pooled, 1, self.dim * self.clusters);
        Ok(self.reduction.forward(g, flat))
    }
}

/// Parameters of the whole fusion module.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub text: ModalityAggregator,
    pub image: ModalityAggregator,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    hidden: usize,
    dim: usize,
}

impl FusionState {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        clusters: usize,
        hidden: usize,
        mode: CentroidMode,
        rng: &mut R,
    ) -> Self {
        Self {
            text: ModalityAggregator::new(store, &format!("{name}.text"), dim, clusters, hidden, mode, rng),
            image: ModalityAggregator::new(store, &format!("{name}.image"), dim, clusters, hidden, mode, rng),
            query: Linear::new(store, &format!("{name}.attn.q"), hidden, hidden, true, rng),
            key: Linear::new(store, &format!("{name}.attn.k"), hidden, hidden, true, rng),
            value: Linear::new(store, &format!("{name}.attn.v"), hidden, hidden, true, rng),
            output: Linear::new(store, &format!("{name}.out"), 2 * hidden, dim, true, rng),
            hidden,
            dim,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn value_projection(&self) -> &Linear {
        &self.value
    }

    pub fn output_projection(&self) -> &Linear {
        &self.output
    }

    /// Aggregates a modality; `None` for an empty list (a POI without
    /// images) so the fusion layer can treat the slot as absent.
    pub fn aggregate_optional(
        &self,
        g: &mut Graph,
        agg: &ModalityAggregator,
        embeddings: &[NodeId],
    ) -> Result<Option<NodeId>> {
        if embeddings.is_empty() {
            Ok(None)
        } else {
            agg.aggregate(g, embeddings).map(Some)
        }
    }

    /// Content embedding `1×D` from the per-modality `1×H` vectors.
    ///
    /// Present modality vectors form a token sequence that self-attends with
    /// a residual connection. The text and image slots are then flattened
    /// into one `2H` vector (an absent or unused slot is zero) and
    /// projected to `D`. A uni-modal variant therefore uses the same path
    /// with the other slot empty.
    pub fn fuse(
        &self,
        g: &mut Graph,
        text: Option<NodeId>,
        image: Option<NodeId>,
        variant: Variant,
    ) -> Result<NodeId> {
        let text = text.filter(|_| variant.uses_text());
        let image = image.filter(|_| variant.uses_image());
        for x in [text, image].into_iter().flatten() {
            let (r, c) = g.shape(x);
            if (r, c) != (1, self.hidden) {
                return Err(Error::DimensionMismatch {
                    expected: self.hidden,
                    found: r * c,
                });
            }
        }
        let present: Vec<NodeId> = [text, image].into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Empty("fusion inputs"));
        }
        let tokens = if present.len() == 1 {
            present[0]
        } else {
            g.concat_rows(&present)
        };
        let q = self.query.forward(g, tokens);
        let k = self.key.forward(g, tokens);
        let v = self.value.forward(g, tokens);
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, 1.0 / (self.hidden as f64).sqrt());
        let weights = g.softmax(scores);
        let mixed = g.matmul(weights, v);
        let attended = g.add(tokens, mixed);

        let mut next = 0;
        let mut slot = |g: &mut Graph, present: bool| {
            if present {
                let r = g.row(attended, next);
                next += 1;
                r
            } else {
                g.constant(Tensor::zeros((1, self.hidden)))
            }
        };
        let text_slot = slot(g, text.is_some());
        let image_slot = slot(g, image.is_some());
        let both = g.concat_rows(&[text_slot, image_slot]);
        let flat = g.reshape(both, 1, 2 * self.hidden);
        Ok(self.output.forward(g, flat))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_gradient, GradCheckConfig};
    use crate::rng::seeded;
    use rand::Rng;

    const D: usize = 6;
    const K: usize = 3;
    const H: usize = 4;

    fn fusion(store: &mut ParamStore) -> FusionState {
        FusionState::new(store, "tif", D, K, H, CentroidMode::Scalar, &mut seeded(11))
    }

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn exp_normalize(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn zero_gate_gives_uniform_assignment() {
        let mut store = ParamStore::new();
        let bank = ClusterBank::new(&mut store, "b", D, 4, CentroidMode::Scalar, &mut seeded(0));
        store.get_mut(bank.gate().weight).fill(0.0);
        let a = bank.cluster_assign(&store, &[1.0, -2.0, 3.0, 0.5, 0.0, 1.0]).unwrap();
        assert_eq!(a, vec![0.25; 4]);
    }

    #[test]
    fn bias_shift_leaves_assignment_unchanged() {
        let mut store = ParamStore::new();
        let bank = ClusterBank::new(&mut store, "b", D, K, CentroidMode::Scalar, &mut seeded(1));
        let e = random_vec(&mut seeded(2), D);
        let before = bank.cluster_assign(&store, &e).unwrap();
        store.get_mut(bank.gate().bias.unwrap()).mapv_inplace(|b| b + 0.75);
        let after = bank.cluster_assign(&store, &e).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_matches_exp_normalize_oracle() {
        let mut rng = seeded(3);
        for trial in 0..20 {
            let mut store = ParamStore::new();
            let bank = ClusterBank::new(&mut store, "b", D, K, CentroidMode::Scalar, &mut seeded(trial));
            store.get_mut(bank.gate().bias.unwrap()).mapv_inplace(|_| rng.random_range(-1.0..1.0));
            let e = random_vec(&mut rng, D);
            let w = store.get(bank.gate().weight);
            let b = store.get(bank.gate().bias.unwrap());
            let z: Vec<f64> = (0..K)
                .map(|k| (0..D).map(|i| w[[i, k]] * e[i]).sum::<f64>() + b[[0, k]])
                .collect();
            let oracle = exp_normalize(&z);
            let got = bank.cluster_assign(&store, &e).unwrap();
            for (x, y) in got.iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_alpha_zeroes_column_and_centroid_gives_zero_residual() {
        let mut store = ParamStore::new();
        let bank = ClusterBank::new(&mut store, "b", D, K, CentroidMode::Scalar, &mut seeded(4));
        store.get_mut(bank.gate().weight).fill(0.0);
        // Push cluster 1 to zero weight.
        store.get_mut(bank.gate().bias.unwrap())[[0, 1]] = -1e4;
        let c0 = store.get(bank.centroids())[[0, 0]];
        let e = vec![c0; D];
        let r = bank.refine_descriptors(&store, &e).unwrap();
        for i in 0..D {
            assert_eq!(r[[i, 1]], 0.0);
            assert_eq!(r[[i, 0]], 0.0);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let bank = ClusterBank::new(&mut store, "b", D, K, CentroidMode::Scalar, &mut seeded(4));
        assert!(matches!(
            bank.cluster_assign(&store, &[1.0; 5]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_modality_is_an_error_for_aggregate() {
        let mut store = ParamStore::new();
        let f = fusion(&mut store);
        let mut g = Graph::new(&store);
        assert!(f.text.aggregate(&mut g, &[]).is_err());
        assert_eq!(f.aggregate_optional(&mut g, &f.image, &[]).unwrap(), None);
    }

    #[test]
    fn vector_centroids_match_loop() {
        let mut store = ParamStore::new();
        let bank = ClusterBank::new(&mut store, "b", D, K, CentroidMode::Vector, &mut seeded(8));
        let e = random_vec(&mut seeded(9), D);
        let alpha = bank.cluster_assign(&store, &e).unwrap();
        let c = store.get(bank.centroids());
        let r = bank.refine_descriptors(&store, &e).unwrap();
        for i in 0..D {
            for k in 0..K {
                assert!((r[[i, k]] - alpha[k] * (e[i] - c[[k, i]])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_output_dim_for_all_variants() {
        let mut store = ParamStore::new();
        let f = fusion(&mut store);
        let mut g = Graph::new(&store);
        let x = g.row_vector(&[0.1, 0.2, -0.3, 0.4]);
        let v = g.row_vector(&[0.5, -0.1, 0.0, 0.3]);
        for variant in [Variant::Full, Variant::TextOnly, Variant::ImageOnly] {
            let c = f.fuse(&mut g, Some(x), Some(v), variant).unwrap();
            assert_eq!(g.shape(c), (1, D));
        }
        assert!(f.fuse(&mut g, None, None, Variant::Full).is_err());
        assert!(f.fuse(&mut g, None, Some(v), Variant::TextOnly).is_err());
        let bad = g.row_vector(&[1.0; 3]);
        assert!(f.fuse(&mut g, Some(bad), None, Variant::Full).is_err());
    }

    #[test]
    fn disabled_attention_is_linear_projection() {
        let mut store = ParamStore::new();
        let f = fusion(&mut store);
        store.get_mut(f.value_projection().weight).fill(0.0);
        store.get_mut(f.value_projection().bias.unwrap()).fill(0.0);
        let x = [0.1, 0.2, -0.3, 0.4];
        let v = [0.5, -0.1, 0.0, 0.3];
        let mut g = Graph::new(&store);
        let xn = g.row_vector(&x);
        let vn = g.row_vector(&v);
        let c = f.fuse(&mut g, Some(xn), Some(vn), Variant::Full).unwrap();
        let w = store.get(f.output_projection().weight);
        let b = store.get(f.output_projection().bias.unwrap());
        let cat: Vec<f64> = x.iter().chain(v.iter()).copied().collect();
        for j in 0..D {
            let expect = (0..2 * H).map(|i| cat[i] * w[[i, j]]).sum::<f64>() + b[[0, j]];
            assert!((g.value(c)[[0, j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn text_only_ignores_image_bank() {
        let mut store = ParamStore::new();
        let f = fusion(&mut store);
        let run = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let t1 = g.row_vector(&random_vec(&mut seeded(20), D));
            let t2 = g.row_vector(&random_vec(&mut seeded(21), D));
            let i1 = g.row_vector(&random_vec(&mut seeded(22), D));
            let x = f.text.aggregate(&mut g, &[t1, t2]).unwrap();
            let v = f.image.aggregate(&mut g, &[i1]).unwrap();
            let c = f.fuse(&mut g, Some(x), Some(v), Variant::TextOnly).unwrap();
            g.value(c).clone()
        };
        let before = run(&store);
        let image_ids: Vec<ParamId> = store.ids_with_prefix("tif.image.").collect();
        assert!(!image_ids.is_empty());
        for id in image_ids {
            store.get_mut(id).fill(0.0);
        }
        assert_eq!(before, run(&store));
    }

    #[test]
    fn content_gradient_wrt_modality_vectors() {
        let mut store = ParamStore::new();
        let f = fusion(&mut store);
        let input = random_vec(&mut seeded(30), 2 * H);
        for coord in 0..D {
            let report = check_input_gradient(
                &input,
                |xs| {
                    let mut g = Graph::new(&store);
                    let (x, ix) = g.variable(Tensor::from_shape_vec((1, H), xs[..H].to_vec()).unwrap());
                    let (v, iv) = g.variable(Tensor::from_shape_vec((1, H), xs[H..].to_vec()).unwrap());
                    let c = f.fuse(&mut g, Some(x), Some(v), Variant::Full).unwrap();
                    let sel = g.constant(Tensor::from_shape_fn((D, 1), |(i, _)| (i == coord) as u8 as f64));
                    let y = g.matmul(c, sel);
                    let grads = g.backward(y);
                    let mut grad: Vec<f64> = grads.var(ix).unwrap().iter().copied().collect();
                    grad.extend(grads.var(iv).unwrap().iter().copied());
                    (g.scalar(y), grad)
                },
                &GradCheckConfig::exhaustive(),
            );
            assert!(report.passed(), "{report}");
        }
    }
}
