//! Domain-adaptive pretraining of the image backbone.
//!
//! Three objectives share the backbone: masked tag prediction from a
//! templated sentence (`L_MSK`), symmetric image-tag contrast (`L_ITC`) and
//! binary image-tag matching (`L_ITM`). `L_DIE` is their unweighted sum.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::autograd::{softmax, CeRow, Graph, NodeId};
use crate::checkpoint::{self, base_manifest};
use crate::config::ModelConfig;
use crate::data::{Dataset, Split};
use crate::encoders::{ImageBackbone, TextEncoder};
use crate::error::{Error, Result};
use crate::layers::{CrossAttentionBlock, Linear};
use crate::matcher::{match_probabilities, MatchHead};
use crate::model::{M3pt, ModelShape};
use crate::optim::{AdamW, LinearSchedule};
use crate::params::{ParamStore, Tensor};
use crate::rng::{self, SeededRng};
use crate::vocab::{TagVocab, TokenVocab, MASK};

pub const DIE_STREAM: u64 = 1;
pub const DIE_TRAIN_STREAM: u64 = 2;
pub const DIE_KIND: &str = "die";

/// A templated sentence naming a tag, with one tag token masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSample {
    pub tag: usize,
    pub sentence: Vec<usize>,
    pub masked: Vec<usize>,
    pub position: usize,
    pub target: usize,
}

/// Expands `template` with the tag string and masks one of the tag's
/// tokens, chosen uniformly.
pub fn make_masked_sample<R: Rng + ?Sized>(
    tokens: &TokenVocab,
    tags: &TagVocab,
    tag: usize,
    template: &str,
    rng: &mut R,
) -> Result<MaskedSample> {
    let tag_tokens = tags.tokens_of(tag)?;
    let name = tags.tag(tag).expect("id checked");
    let sentence = tokens.tokenize(&template.replace("{}", name));
    let start = sentence
        .windows(tag_tokens.len())
        .position(|w| w == tag_tokens)
        .ok_or_else(|| Error::InvalidArgument(format!("tag {name} absent from template {template:?}")))?;
    let position = start + rng.random_range(0..tag_tokens.len());
    let mut masked = sentence.clone();
    let target = std::mem::replace(&mut masked[position], MASK);
    Ok(MaskedSample {
        tag,
        sentence,
        masked,
        position,
        target,
    })
}

fn check_dim(g: &Graph, x: NodeId, dim: usize) -> Result<()> {
    let (_, c) = g.shape(x);
    if c != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: c });
    }
    Ok(())
}

fn validate_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature {tau} must be positive")))
    }
}

/// `softmax_t(qᵀt / tau)` over the rows of `set`.
fn similarity(query: &[f64], set: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::Empty("contrast set"));
    }
    validate_tau(tau)?;
    let logits = set
        .iter()
        .map(|t| {
            if t.len() != query.len() {
                return Err(Error::DimensionMismatch {
                    expected: query.len(),
                    found: t.len(),
                });
            }
            Ok(query.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / tau)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&logits))
}

/// `s(v, t)` over the tag set paired with image embedding `v`.
pub fn similarity_image_to_tags(v: &[f64], tags: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    similarity(v, tags, tau)
}

/// `s(t, v)` over the image set paired with tag embedding `t`.
pub fn similarity_tag_to_images(t: &[f64], images: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    similarity(t, images, tau)
}

/// Symmetric contrastive loss between the rows of `left` (`n×D`) and
/// `right` (`m×D`). Rows are L2-normalized first. For every positive pair
/// `(i, j)` it adds `½(−log s(left_i, right_j) − log s(right_j, left_i))`,
/// each softmax running over the whole opposite set.
pub fn symmetric_contrastive(
    g: &mut Graph,
    left: NodeId,
    right: NodeId,
    positives: &[(usize, usize)],
    tau: f64,
) -> Result<NodeId> {
    validate_tau(tau)?;
    if positives.is_empty() {
        return Err(Error::Empty("positive pairs"));
    }
    let (n, dl) = g.shape(left);
    let (m, dr) = g.shape(right);
    if dl != dr {
        return Err(Error::DimensionMismatch { expected: dl, found: dr });
    }
    for &(i, j) in positives {
        if i >= n {
            return Err(Error::GoldNotInSet(i));
        }
        if j >= m {
            return Err(Error::GoldNotInSet(j));
        }
    }
    let l = g.l2_normalize(left);
    let r = g.l2_normalize(right);
    let s = g.matmul_nt(l, r);
    let s = g.scale(s, 1.0 / tau);
    let st = g.transpose(s);
    let row = |row: usize, target: usize| CeRow {
        row,
        candidates: None,
        target,
        weight: 0.5,
    };
    let forward = g.cross_entropy(s, positives.iter().map(|&(i, j)| row(i, j)).collect());
    let backward = g.cross_entropy(st, positives.iter().map(|&(i, j)| row(j, i)).collect());
    Ok(g.add(forward, backward))
}

/// Sum of two-class cross-entropies over stacked `k×2` logits.
pub fn binary_ce(g: &mut Graph, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
    if labels.is_empty() {
        return Err(Error::Empty("labelled pairs"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidLabel(y));
    }
    let rows = labels
        .iter()
        .enumerate()
        .map(|(row, &y)| CeRow {
            row,
            candidates: None,
            target: y as usize,
            weight: 1.0,
        })
        .collect();
    Ok(g.cross_entropy(logits, rows))
}

/// Pretraining model: the image backbone, its own text encoder and the
/// two heads.
#[derive(Clone, Debug)]
pub struct DieModel {
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub store: ParamStore,
    pub backbone: ImageBackbone,
    pub text: TextEncoder,
    msk_block: CrossAttentionBlock,
    msk_head: Linear,
    pub itm: MatchHead,
}

impl DieModel {
    pub fn new(config: ModelConfig, shape: ModelShape) -> Result<Self> {
        let config = config.validate()?;
        let mut rng = rng::stream(config.seed, DIE_STREAM);
        let mut store = ParamStore::new();
        let ffn = config.ffn_dim();
        let backbone = ImageBackbone::new(
            &mut store,
            "image",
            shape.grid_size,
            shape.channels,
            config.patch_size,
            config.dim,
            config.layers,
            ffn,
            &mut rng,
        )?;
        let text = TextEncoder::new(
            &mut store,
            "die.text",
            shape.token_vocab_size,
            config.max_seq_len,
            config.dim,
            config.layers,
            ffn,
            &mut rng,
        );
        let msk_block = CrossAttentionBlock::new(&mut store, "die.msk.xattn", config.dim, ffn, &mut rng);
        let msk_head = Linear::new(&mut store, "die.msk.head", config.dim, shape.token_vocab_size, true, &mut rng);
        let itm = MatchHead::new(&mut store, "die.itm", config.dim, ffn, &mut rng);
        Ok(Self {
            config,
            shape,
            store,
            backbone,
            text,
            msk_block,
            msk_head,
            itm,
        })
    }

    pub fn msk_head(&self) -> &Linear {
        &self.msk_head
    }

    /// Token logits `1×U` for image embedding `v` (`1×D`) refined against
    /// the encoded masked sentence `memory` (`n×D`).
    pub fn msk_logits(&self, g: &mut Graph, v: NodeId, memory: NodeId) -> Result<NodeId> {
        check_dim(g, v, self.config.dim)?;
        check_dim(g, memory, self.config.dim)?;
        let refined = self.msk_block.forward(g, v, memory);
        Ok(self.msk_head.forward(g, refined))
    }

    /// `ŷ_{v,x̃}` over the token vocabulary.
    pub fn predict_masked_token(&self, v: &[f64], masked: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let vn = g.row_vector(v);
        let memory = self.text.forward_sequence(&mut g, masked)?;
        let z = self.msk_logits(&mut g, vn, memory)?;
        Ok(softmax(&g.value(z).iter().copied().collect::<Vec<_>>()))
    }

    /// `L_MSK` summed over samples; `images[i]` is the embedding of the
    /// image behind `samples[i]`.
    pub fn loss_msk(&self, g: &mut Graph, images: &[NodeId], samples: &[MaskedSample]) -> Result<NodeId> {
        if samples.is_empty() {
            return Err(Error::Empty("masked samples"));
        }
        if images.len() != samples.len() {
            return Err(Error::InvalidArgument("one image per masked sample".into()));
        }
        let logits = images
            .iter()
            .zip(samples)
            .map(|(&v, s)| {
                let memory = self.text.forward_sequence(g, &s.masked)?;
                self.msk_logits(g, v, memory)
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits) };
        let rows = samples
            .iter()
            .enumerate()
            .map(|(row, s)| CeRow {
                row,
                candidates: None,
                target: s.target,
                weight: 1.0,
            })
            .collect();
        Ok(g.cross_entropy(stacked, rows))
    }

    /// `L_ITC` between image embeddings and tag embeddings.
    pub fn loss_itc(&self, g: &mut Graph, images: NodeId, tags: NodeId, positives: &[(usize, usize)]) -> Result<NodeId> {
        symmetric_contrastive(g, images, tags, positives, self.config.tau2)
    }

    /// `L_ITM` over `(image, tag, label)` triples.
    pub fn loss_itm(&self, g: &mut Graph, pairs: &[(NodeId, NodeId, u8)]) -> Result<NodeId> {
        if let Some(&(_, _, y)) = pairs.iter().find(|p| p.2 > 1) {
            return Err(Error::InvalidLabel(y));
        }
        let logits = pairs
            .iter()
            .map(|&(v, t, _)| self.itm.logits(g, v, t))
            .collect::<Result<Vec<_>>>()?;
        if logits.is_empty() {
            return Err(Error::Empty("labelled pairs"));
        }
        let stacked = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits) };
        let labels: Vec<u8> = pairs.iter().map(|p| p.2).collect();
        binary_ce(g, stacked, &labels)
    }

    /// `ŷ_{v,t}`: probability that image embedding `v` depicts tag `t`.
    pub fn match_image_tag(&self, v: &[f64], t: &[f64]) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let vn = g.row_vector(v);
        let tn = g.row_vector(t);
        let z = self.itm.logits(&mut g, vn, tn)?;
        Ok(match_probabilities(g.value(z))[0])
    }

    /// Every tag embedded by the pretraining text encoder; row = tag id.
    pub fn tag_matrix(&self, tags: &TagVocab) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(tags.len() * self.config.dim);
        for t in 0..tags.len() {
            rows.extend(self.text.encode_text(&self.store, tags.tokens_of(t)?)?);
        }
        Ok(Tensor::from_shape_vec((tags.len(), self.config.dim), rows).expect("row count"))
    }

    pub fn save(&self, dir: &Path, step: u64) -> Result<()> {
        checkpoint::save_store(dir, &base_manifest(DIE_KIND, &self.config, self.shape, step), &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(&dir.join(checkpoint::MANIFEST_FILE))?;
        checkpoint::check_versions(&manifest, DIE_KIND)?;
        let config = ModelConfig::from_manifest(&manifest)?;
        let mut model = Self::new(config, checkpoint::shape_from_manifest(&manifest)?)?;
        checkpoint::load_store_into(dir, &mut model.store)?;
        Ok(model)
    }
}

/// Copies the pretrained backbone (and, if configured, the pretraining text
/// encoder) into `model`.
pub fn init_from_die(model: &mut M3pt, die: &DieModel) -> Result<()> {
    if model.shape != die.shape || model.config.dim != die.config.dim || model.config.layers != die.config.layers {
        return Err(Error::InvalidArgument("pretrained model does not match the target architecture".into()));
    }
    model.store.copy_prefix_from(&die.store, "image.", "image.")?;
    if model.config.share_die_text_encoder {
        model.store.copy_prefix_from(&die.store, "die.text.", "text.")?;
    }
    Ok(())
}

/// An image with every tag it depicts.
#[derive(Clone, Debug)]
pub struct PretrainItem {
    pub image: String,
    pub tags: Vec<usize>,
}

/// Groups the training split's image-tag pairs by image, in key order.
pub fn pretrain_items(dataset: &Dataset) -> Vec<PretrainItem> {
    let mut by_image: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (image, tag) in dataset.pretrain_pairs(Split::Train) {
        let tags = by_image.entry(image).or_default();
        if !tags.contains(&tag) {
            tags.push(tag);
        }
    }
    by_image
        .into_iter()
        .map(|(image, mut tags)| {
            tags.sort_unstable();
            PretrainItem { image, tags }
        })
        .collect()
}

/// Per-step sub-losses of pretraining.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DieStep {
    pub step: usize,
    pub msk: f64,
    pub itc: f64,
    pub itm: f64,
    pub total: f64,
}

impl DieStep {
    pub fn log_line(&self) -> String {
        format!("{}, {:.6}, {:.6}, {:.6}, {:.6}", self.step, self.msk, self.itc, self.itm, self.total)
    }
}

/// Losses of one pretraining batch, before the backward pass.
pub struct DieBatchLoss {
    pub msk: NodeId,
    pub itc: NodeId,
    pub itm: NodeId,
    pub total: NodeId,
}

/// Builds `L_DIE` for one batch of items. Draws, in order: one gold tag and
/// template per item for masking, then one negative tag per item for
/// matching.
pub fn die_batch_loss(
    die: &DieModel,
    g: &mut Graph,
    dataset: &Dataset,
    patches: &BTreeMap<String, Tensor>,
    batch: &[&PretrainItem],
    rng: &mut SeededRng,
) -> Result<DieBatchLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("pretraining batch"));
    }
    let images: Vec<NodeId> = batch
        .iter()
        .map(|it| {
            let p = patches
                .get(&it.image)
                .ok_or_else(|| Error::DanglingImage(it.image.clone()))?;
            let p = g.constant(p.clone());
            Ok(die.backbone.forward_patches(g, p))
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::with_capacity(batch.len());
    for it in batch {
        let tag = *it.tags.choose(rng).ok_or(Error::Empty("item tags"))?;
        let template = die.config.templates.choose(rng).expect("validated non-empty");
        samples.push(make_masked_sample(&dataset.tokens, &dataset.tags, tag, template, rng)?);
    }
    let msk = die.loss_msk(g, &images, &samples)?;

    let mut tag_set: Vec<usize> = batch.iter().flat_map(|it| it.tags.iter().copied()).collect();
    tag_set.sort_unstable();
    tag_set.dedup();
    let tag_rows = tag_set
        .iter()
        .map(|&t| die.text.forward(g, dataset.tags.tokens_of(t)?))
        .collect::<Result<Vec<_>>>()?;
    let tag_matrix = if tag_rows.len() == 1 { tag_rows[0] } else { g.concat_rows(&tag_rows) };
    let image_matrix = if images.len() == 1 { images[0] } else { g.concat_rows(&images) };
    let col = |t: usize| tag_set.binary_search(&t).expect("tag in set");
    let positives: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .flat_map(|(i, it)| it.tags.iter().map(move |&t| (i, t)))
        .map(|(i, t)| (i, col(t)))
        .collect();
    let itc = die.loss_itc(g, image_matrix, tag_matrix, &positives)?;

    let mut pairs = Vec::with_capacity(2 * batch.len());
    for (i, (it, s)) in batch.iter().zip(&samples).enumerate() {
        pairs.push((images[i], tag_rows[col(s.tag)], 1));
        let negatives: Vec<usize> = tag_set.iter().copied().filter(|t| !it.tags.contains(t)).collect();
        if let Some(&neg) = negatives.choose(rng) {
            pairs.push((images[i], tag_rows[col(neg)], 0));
        }
    }
    let itm = die.loss_itm(g, &pairs)?;
    let total = g.sum(&[msk, itc, itm]);
    Ok(DieBatchLoss { msk, itc, itm, total })
}

/// Options for [`pretrain_die`].
#[derive(Clone, Debug, Default)]
pub struct DieOptions<'a> {
    /// Append-only log of `step, L_MSK, L_ITC, L_ITM, L_DIE` lines.
    pub log_path: Option<&'a Path>,
}

/// Minimizes `L_DIE` over the training split's image-tag pairs.
pub fn pretrain_die(dataset: &Dataset, cfg: &ModelConfig, opts: &DieOptions) -> Result<(DieModel, Vec<DieStep>)> {
    let mut die = DieModel::new(cfg.clone(), ModelShape::of(dataset))?;
    let items = pretrain_items(dataset);
    if items.is_empty() {
        return Err(Error::Empty("pretraining pairs"));
    }
    let mut patches = BTreeMap::new();
    for it in &items {
        patches.insert(it.image.clone(), die.backbone.patchify(dataset.image(&it.image)?)?);
    }
    let mut log = match opts.log_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };

    let batch_size = cfg.die_batch_size.max(1);
    let per_epoch = items.len().div_ceil(batch_size);
    let schedule = LinearSchedule::new(cfg.lr_start, cfg.lr_end, per_epoch * cfg.die_epochs);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = rng::stream(cfg.seed, DIE_TRAIN_STREAM);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.die_epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&PretrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let (record, grads) = {
                let mut g = Graph::new(&die.store);
                let loss = die_batch_loss(&die, &mut g, dataset, &patches, &batch, &mut rng)?;
                let record = DieStep {
                    step,
                    msk: g.scalar(loss.msk),
                    itc: g.scalar(loss.itc),
                    itm: g.scalar(loss.itm),
                    total: g.scalar(loss.total),
                };
                (record, g.backward(loss.total))
            };
            if !record.total.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged { step });
            }
            opt.step(&mut die.store, &grads, schedule.lr(step));
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", record.log_line()).map_err(|e| Error::io("<die log>", e))?;
            }
            history.push(record);
            step += 1;
        }
    }
    if let Some(mut w) = log {
        w.flush().map_err(|e| Error::io("<die log>", e))?;
    }
    Ok((die, history))
}

/// Fraction of `items` whose nearest tag (by dot product between the image
/// embedding and the pretraining text encoder's tag embeddings) is gold.
pub fn retrieval_recall_at_1(die: &DieModel, dataset: &Dataset, items: &[PretrainItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("probe items"));
    }
    let tags = die.tag_matrix(&dataset.tags)?;
    let mut hits = 0usize;
    for it in items {
        let v = die.backbone.encode_image(&die.store, dataset.image(&it.image)?)?;
        let best = tags
            .rows()
            .into_iter()
            .map(|t| t.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("non-empty vocabulary");
        hits += it.tags.contains(&best) as usize;
    }
    Ok(hits as f64 / items.len() as f64)
}
