//! End-to-end training with `L = L_PTM + α·L_PTC`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::autograd::{CeRow, Graph, NodeId};
use crate::checkpoint::save_checkpoint;
use crate::config::ModelConfig;
use crate::data::{Dataset, Split};
use crate::die::{init_from_die, symmetric_contrastive, DieModel};
use crate::error::{Error, Result};
use crate::eval::{encode_split, instances_from_scores, score_encoded};
use crate::metrics::example_prf;
use crate::model::{EncodedPoi, M3pt, ModelShape};
use crate::optim::{AdamW, LinearSchedule};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, SeededRng};

pub const TRAIN_STREAM: u64 = 3;
pub const DROPOUT_STREAM: u64 = 4;

/// `n` distinct non-gold tags, uniformly without replacement. `gold` must
/// be sorted.
pub fn sample_negatives<R: Rng + ?Sized>(gold: &[usize], vocab_size: usize, rng: &mut R, n: usize) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..vocab_size).filter(|t| gold.binary_search(t).is_err()).collect();
    if n > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "{n} negatives requested, {} non-gold tags available",
            pool.len()
        )));
    }
    Ok(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

/// POIs of one step with their positive and negative tags.
#[derive(Clone, Debug, PartialEq)]
pub struct PoiTagBatch {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl PoiTagBatch {
    /// Draws `per_positive` negatives per gold tag for every POI, capped
    /// at the number of non-gold tags.
    pub fn sample<R: Rng + ?Sized>(golds: &[&[usize]], vocab_size: usize, per_positive: usize, rng: &mut R) -> Result<Self> {
        let mut negatives = Vec::with_capacity(golds.len());
        for gold in golds {
            if gold.is_empty() {
                return Err(Error::Empty("gold tags of a training POI"));
            }
            let n = (per_positive * gold.len()).min(vocab_size - gold.len());
            negatives.push(sample_negatives(gold, vocab_size, rng, n)?);
        }
        Ok(Self {
            positives: golds.iter().map(|g| g.to_vec()).collect(),
            negatives,
        })
    }

    /// Every tag the batch touches, sorted.
    pub fn tag_set(&self) -> Vec<usize> {
        let mut set: Vec<usize> = self.positives.iter().chain(&self.negatives).flatten().copied().collect();
        set.sort_unstable();
        set.dedup();
        set
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }
}

/// `L_PTM`: summed two-class cross-entropy over every (POI, tag) pair.
/// `tag_matrix` rows follow `tag_set`.
pub fn loss_ptm(
    model: &M3pt,
    g: &mut Graph,
    contents: &[NodeId],
    tag_matrix: NodeId,
    tag_set: &[usize],
    batch: &PoiTagBatch,
) -> Result<NodeId> {
    let row = |t: usize| tag_set.binary_search(&t).map_err(|_| Error::UnknownTag(t.to_string()));
    let mut logits = Vec::with_capacity(contents.len());
    let mut labels = Vec::new();
    for ((&c, pos), neg) in contents.iter().zip(&batch.positives).zip(&batch.negatives) {
        if let Some(t) = pos.iter().find(|t| neg.contains(t)) {
            return Err(Error::InvalidArgument(format!("tag {t} both positive and negative")));
        }
        let rows = pos.iter().chain(neg).map(|&t| row(t)).collect::<Result<Vec<_>>>()?;
        let queries = g.gather(tag_matrix, &rows);
        logits.push(model.matcher.logits(g, queries, c)?);
        labels.extend(std::iter::repeat_n(1usize, pos.len()).chain(std::iter::repeat_n(0, neg.len())));
    }
    if labels.is_empty() {
        return Err(Error::Empty("POI-tag pairs"));
    }
    let stacked = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits) };
    let rows = labels
        .into_iter()
        .enumerate()
        .map(|(row, target)| CeRow {
            row,
            candidates: None,
            target,
            weight: 1.0,
        })
        .collect();
    Ok(g.cross_entropy(stacked, rows))
}

/// `L_PTC`: symmetric contrast between content embeddings and the batch's
/// tags at temperature `tau1`.
pub fn loss_ptc(
    g: &mut Graph,
    contents: NodeId,
    tag_matrix: NodeId,
    tag_set: &[usize],
    batch: &PoiTagBatch,
    tau1: f64,
) -> Result<NodeId> {
    let mut positives = Vec::new();
    for (i, pos) in batch.positives.iter().enumerate() {
        for &t in pos {
            let j = tag_set.binary_search(&t).map_err(|_| Error::GoldNotInSet(t))?;
            positives.push((i, j));
        }
    }
    symmetric_contrastive(g, contents, tag_matrix, &positives, tau1)
}

/// `L = L_PTM + α·L_PTC`; exactly `L_PTM` when `α = 0`.
pub fn total_loss(g: &mut Graph, ptm: NodeId, ptc: NodeId, alpha: f64) -> NodeId {
    if alpha == 0.0 {
        ptm
    } else {
        let weighted = g.scale(ptc, alpha);
        g.add(ptm, weighted)
    }
}

pub struct BatchLoss {
    pub ptm: NodeId,
    pub ptc: NodeId,
    pub total: NodeId,
}

/// Builds all losses of one batch.
pub fn batch_loss(model: &M3pt, g: &mut Graph, dataset: &Dataset, pois: &[&EncodedPoi], batch: &PoiTagBatch) -> Result<BatchLoss> {
    if pois.len() != batch.len() || batch.is_empty() {
        return Err(Error::InvalidArgument("batch and POI list disagree or are empty".into()));
    }
    let contents = pois
        .iter()
        .map(|p| model.content(g, p))
        .collect::<Result<Vec<_>>>()?;
    let tag_set = batch.tag_set();
    let tag_matrix = model.tag_embeddings(g, &dataset.tags, &tag_set)?;
    let ptm = loss_ptm(model, g, &contents, tag_matrix, &tag_set, batch)?;
    let content_matrix = if contents.len() == 1 { contents[0] } else { g.concat_rows(&contents) };
    let ptc = loss_ptc(g, content_matrix, tag_matrix, &tag_set, batch, model.config.tau1)?;
    let total = total_loss(g, ptm, ptc, model.config.alpha);
    Ok(BatchLoss { ptm, ptc, total })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub ptm: f64,
    pub ptc: f64,
    pub loss: f64,
    /// Gradient norm over image-side parameters (backbone and image bank).
    pub image_grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub step: usize,
    pub val_f1e: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub lr: f64,
    pub history: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub optimizer: AdamW,
    pub best_epoch: usize,
}

impl TrainState {
    pub fn best_val_f1e(&self) -> f64 {
        self.epochs[self.best_epoch].val_f1e
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Pretrained backbone to start from.
    pub die: Option<&'a DieModel>,
    /// Training log: `epoch, step, lr, L_PTM, L_PTC, L, val_F1e` per step.
    pub log_path: Option<&'a Path>,
    /// Directory for the best checkpoint, or the last good one on
    /// divergence.
    pub checkpoint_dir: Option<&'a Path>,
}

fn image_param_ids(store: &ParamStore) -> Vec<ParamId> {
    store
        .ids_with_prefix("image.")
        .chain(store.ids_with_prefix("tif.image."))
        .collect()
}

/// Example-based F1 of `pois` at the model's threshold.
pub fn validation_f1e(model: &M3pt, dataset: &Dataset, indices: &[usize], encoded: &[EncodedPoi]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let tag_matrix = model.tag_matrix(&dataset.tags)?;
    let scores = score_encoded(model, encoded, &tag_matrix)?;
    let golds: Vec<&[usize]> = indices.iter().map(|&i| dataset.pois[i].gold_tags.as_slice()).collect();
    Ok(example_prf(&instances_from_scores(&golds, &scores, model.config.pi)?).2)
}

struct LogWriter(Option<BufWriter<File>>);

impl LogWriter {
    fn line(&mut self, r: &StepRecord, val: Option<f64>) -> Result<()> {
        if let Some(w) = self.0.as_mut() {
            let val = val.map_or("-".to_string(), |v| format!("{v:.6}"));
            writeln!(
                w,
                "{}, {}, {:.6e}, {:.6}, {:.6}, {:.6}, {}",
                r.epoch, r.step, r.lr, r.ptm, r.ptc, r.loss, val
            )
            .map_err(|e| Error::io("<train log>", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.0.as_mut() {
            w.flush().map_err(|e| Error::io("<train log>", e))?;
        }
        Ok(())
    }
}

/// Trains on the training split, validating after every epoch. Returns the
/// parameters of the best validation epoch.
pub fn train(dataset: &Dataset, cfg: &ModelConfig, opts: &TrainOptions) -> Result<(M3pt, TrainState)> {
    let mut model = M3pt::new(cfg.clone(), ModelShape::of(dataset))?;
    if let Some(die) = opts.die {
        init_from_die(&mut model, die)?;
    }
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let val_idx = dataset.indices(Split::Val);
    let train_enc = encode_split(&model, dataset, &train_idx)?;
    let val_enc = encode_split(&model, dataset, &val_idx)?;
    let mut log = LogWriter(match opts.log_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    });

    let batch_size = cfg.batch_size.max(1);
    let per_epoch = train_idx.len().div_ceil(batch_size);
    let schedule = LinearSchedule::new(cfg.lr_start, cfg.lr_end, per_epoch * cfg.epochs).with_warmup(per_epoch * cfg.warmup_epochs);
    let image_ids = image_param_ids(&model.store);
    let mut rng: SeededRng = rng::stream(cfg.seed, TRAIN_STREAM);
    let mut state = TrainState {
        step: 0,
        lr: schedule.lr(0),
        history: Vec::new(),
        epochs: vec![EpochRecord {
            epoch: 0,
            step: 0,
            val_f1e: validation_f1e(&model, dataset, &val_idx, &val_enc)?,
        }],
        optimizer: AdamW::new(cfg.weight_decay),
        best_epoch: 0,
    };
    let mut best = model.store.clone();
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut drop_rng = rng::stream(cfg.seed, DROPOUT_STREAM);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let golds: Vec<&[usize]> = chunk
                .iter()
                .map(|&k| dataset.pois[train_idx[k]].gold_tags.as_slice())
                .collect();
            let batch = PoiTagBatch::sample(&golds, dataset.tags.len(), cfg.negatives_per_positive, &mut rng)?;
            let pois: Vec<&EncodedPoi> = chunk.iter().map(|&k| &train_enc[k]).collect();
            let lr = schedule.lr(state.step);
            let (record, grads) = {
                let mut g = Graph::with_dropout(&model.store, cfg.dropout, drop_rng.clone());
                let loss = batch_loss(&model, &mut g, dataset, &pois, &batch)?;
                drop_rng = g.take_dropout_rng().expect("dropout graph");
                let grads = g.backward(loss.total);
                let record = StepRecord {
                    epoch,
                    step: state.step,
                    lr,
                    ptm: g.scalar(loss.ptm),
                    ptc: g.scalar(loss.ptc),
                    loss: g.scalar(loss.total),
                    image_grad_norm: grads.norm_over(image_ids.iter().copied()),
                };
                (record, grads)
            };
            if !record.loss.is_finite() || !grads.all_finite() {
                log.flush()?;
                if let Some(dir) = opts.checkpoint_dir {
                    save_checkpoint(&model, dir, state.step as u64)?;
                }
                return Err(Error::Diverged { step: state.step });
            }
            state.optimizer.step(&mut model.store, &grads, lr);
            state.lr = lr;
            state.step += 1;
            state.history.push(record);
            if b + 1 < per_epoch {
                log.line(&record, None)?;
            } else {
                let val = validation_f1e(&model, dataset, &val_idx, &val_enc)?;
                log.line(&record, Some(val))?;
                state.epochs.push(EpochRecord {
                    epoch,
                    step: state.step,
                    val_f1e: val,
                });
                if val > state.best_val_f1e() {
                    state.best_epoch = epoch;
                    best = model.store.clone();
                }
            }
        }
    }
    log.flush()?;
    model.store = best;
    if let Some(dir) = opts.checkpoint_dir {
        save_checkpoint(&model, dir, state.epochs[state.best_epoch].step as u64)?;
    }
    Ok((model, state))
}
