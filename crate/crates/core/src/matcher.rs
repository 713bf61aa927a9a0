//! POI-tag matching: a cross-attention block refines each tag embedding
//! against the content embedding, then a two-class head scores the pair.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{CrossAttentionBlock, Linear};
use crate::params::ParamStore;

/// Class index of "match" in the two-class heads.
pub const MATCH: usize = 1;

#[derive(Clone, Debug)]
pub struct MatchHead {
    block: CrossAttentionBlock,
    head: Linear,
    dim: usize,
}

impl MatchHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, ffn_dim: usize, rng: &mut R) -> Self {
        Self {
            block: CrossAttentionBlock::new(store, &format!("{name}.xattn"), dim, ffn_dim, rng),
            head: Linear::new(store, &format!("{name}.head"), dim, 2, true, rng),
            dim,
        }
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Two-class logits, one row per query: `queries` is `n×D`, `memory`
    /// is `m×D`. Rows are independent of each other.
    pub fn logits(&self, g: &mut Graph, queries: NodeId, memory: NodeId) -> Result<NodeId> {
        for x in [queries, memory] {
            let (_, c) = g.shape(x);
            if c != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    found: c,
                });
            }
        }
        let refined = self.block.forward(g, queries, memory);
        Ok(self.head.forward(g, refined))
    }

    /// `ŷ_{p,t}` for one content embedding and one tag embedding.
    pub fn match_poi_tag(&self, store: &ParamStore, content: &[f64], tag: &[f64]) -> Result<f64> {
        Ok(self.match_many(store, content, &[tag.to_vec()])?[0])
    }

    /// Match probabilities of several tags against one content embedding.
    pub fn match_many(&self, store: &ParamStore, content: &[f64], tags: &[Vec<f64>]) -> Result<Vec<f64>> {
        if tags.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(store);
        let c = g.row_vector(content);
        let rows: Vec<NodeId> = tags.iter().map(|t| g.row_vector(t)).collect();
        let q = g.concat_rows(&rows);
        let z = self.logits(&mut g, q, c)?;
        Ok(match_probabilities(g.value(z)))
    }
}

/// Match-class probability of each row of an `n×2` logit matrix.
pub fn match_probabilities(logits: &crate::params::Tensor) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .map(|r| softmax(&[r[0], r[1]])[MATCH])
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagPrediction {
    pub tag: usize,
    pub score: f64,
    pub accepted: bool,
}

/// Scores every tag (index = tag id) and orders by score descending, ties
/// by ascending id. A tag is accepted iff its score strictly exceeds `pi`.
pub fn rank_predictions(scores: &[f64], pi: f64) -> Result<Vec<TagPrediction>> {
    if scores.is_empty() {
        return Err(Error::Empty("tag vocabulary"));
    }
    let mut out: Vec<TagPrediction> = scores
        .iter()
        .enumerate()
        .map(|(tag, &score)| TagPrediction {
            tag,
            score,
            accepted: score > pi,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.tag.cmp(&b.tag)));
    Ok(out)
}

/// First `k` entries of a ranked list.
pub fn rank_topk(ranked: &[TagPrediction], k: usize) -> Result<&[TagPrediction]> {
    if k == 0 || k > ranked.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            ranked.len()
        )));
    }
    Ok(&ranked[..k])
}

/// One line of the `tag` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagRecord {
    pub poi_id: String,
    pub tag: String,
    pub score: f64,
    pub accepted: bool,
}

pub fn write_tag_records<W: Write>(out: &mut W, records: &[TagRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        writeln!(out).map_err(|e| Error::io("<tag output>", e))?;
    }
    Ok(())
}
