//! The end-to-end tagging model: text encoder, image backbone, fusion and
//! matching head over one parameter store.

use crate::autograd::{Graph, NodeId};
use crate::config::{ModelConfig, Variant};
use crate::data::{Dataset, ImageGrid};
use crate::encoders::{ImageBackbone, TextEncoder};
use crate::error::{Error, Result};
use crate::matcher::{match_probabilities, rank_predictions, MatchHead, TagPrediction};
use crate::params::{ParamStore, Tensor};
use crate::rng;
use crate::tif::FusionState;
use crate::vocab::TagVocab;

/// RNG stream used to initialise [`M3pt`] parameters.
pub const MODEL_STREAM: u64 = 0;

/// Dataset-dependent sizes a model is built against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub token_vocab_size: usize,
    pub grid_size: usize,
    pub channels: usize,
}

impl ModelShape {
    pub fn of(dataset: &Dataset) -> Self {
        Self {
            token_vocab_size: dataset.tokens.len(),
            grid_size: dataset.grid_size,
            channels: dataset.channels,
        }
    }
}

/// An image as fed to the model: raw patches, or a fixed embedding when
/// the backbone is frozen and its output can be computed once.
#[derive(Clone, Debug)]
pub enum ImageInput {
    Patches(Tensor),
    Embedding(Vec<f64>),
}

/// Tokenized texts and patchified images of one POI.
#[derive(Clone, Debug)]
pub struct EncodedPoi {
    pub texts: Vec<Vec<usize>>,
    pub images: Vec<ImageInput>,
}

#[derive(Clone, Debug)]
pub struct M3pt {
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub image: ImageBackbone,
    pub fusion: FusionState,
    pub matcher: MatchHead,
}

impl M3pt {
    pub fn new(config: ModelConfig, shape: ModelShape) -> Result<Self> {
        let config = config.validate()?;
        let mut rng = rng::stream(config.seed, MODEL_STREAM);
        let mut store = ParamStore::new();
        let ffn = config.ffn_dim();
        let text = TextEncoder::new(
            &mut store,
            "text",
            shape.token_vocab_size,
            config.max_seq_len,
            config.dim,
            config.layers,
            ffn,
            &mut rng,
        );
        let image = ImageBackbone::new(
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
        let fusion = FusionState::new(
            &mut store,
            "tif",
            config.dim,
            config.clusters,
            config.hidden,
            config.centroid_mode,
            &mut rng,
        );
        let matcher = MatchHead::new(&mut store, "match", config.dim, ffn, &mut rng);
        if config.freeze_backbone {
            store.set_trainable_prefix("image.", false);
        }
        Ok(Self {
            config,
            shape,
            store,
            text,
            image,
            fusion,
            matcher,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn encode_image_input(&self, img: &ImageGrid) -> Result<ImageInput> {
        Ok(ImageInput::Patches(self.image.patchify(img)?))
    }

    /// Tokenizes texts (truncated to `max_seq_len`, empty ones dropped) and
    /// patchifies images of one dataset POI. Images of a frozen backbone
    /// are embedded once here.
    pub fn encode_poi(&self, dataset: &Dataset, index: usize) -> Result<EncodedPoi> {
        let poi = &dataset.pois[index];
        let texts = poi
            .texts()
            .map(|t| dataset.tokens.encode(t, self.config.max_seq_len))
            .filter(|ids| !ids.is_empty())
            .collect();
        let frozen = self.config.freeze_backbone;
        let images = poi
            .images
            .iter()
            .map(|key| {
                let img = dataset.image(key)?;
                if frozen {
                    Ok(ImageInput::Embedding(self.image.encode_image(&self.store, img)?))
                } else {
                    self.encode_image_input(img)
                }
            })
            .collect::<Result<_>>()?;
        Ok(EncodedPoi { texts, images })
    }

    /// Content embedding `c`, `1×D`. Only the modalities the variant uses
    /// are encoded, so the others never enter the graph.
    pub fn content(&self, g: &mut Graph, poi: &EncodedPoi) -> Result<NodeId> {
        let variant = self.variant();
        let text = if variant.uses_text() && !poi.texts.is_empty() {
            let embs = poi
                .texts
                .iter()
                .map(|t| self.text.forward(g, t))
                .collect::<Result<Vec<_>>>()?;
            Some(self.fusion.text.aggregate(g, &embs)?)
        } else {
            None
        };
        let image = if variant.uses_image() && !poi.images.is_empty() {
            let embs: Vec<NodeId> = poi
                .images
                .iter()
                .map(|img| match img {
                    ImageInput::Patches(p) => {
                        let p = g.constant(p.clone());
                        self.image.forward_patches(g, p)
                    }
                    ImageInput::Embedding(e) => g.row_vector(e),
                })
                .collect();
            Some(self.fusion.image.aggregate(g, &embs)?)
        } else {
            None
        };
        if text.is_none() && image.is_none() {
            return Err(Error::Empty("POI inputs for the configured variant"));
        }
        self.fusion.fuse(g, text, image, variant)
    }

    pub fn content_embedding(&self, poi: &EncodedPoi) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let c = self.content(&mut g, poi)?;
        Ok(g.value(c).iter().copied().collect())
    }

    /// Tag embeddings stacked as rows, `|ids|×D`.
    pub fn tag_embeddings(&self, g: &mut Graph, tags: &TagVocab, ids: &[usize]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Empty("tag list"));
        }
        let rows = ids
            .iter()
            .map(|&t| self.text.forward(g, tags.tokens_of(t)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
    }

    /// Every tag embedding as a plain matrix; row = tag id.
    pub fn tag_matrix(&self, tags: &TagVocab) -> Result<Tensor> {
        let ids: Vec<usize> = (0..tags.len()).collect();
        let mut g = Graph::new(&self.store);
        let m = self.tag_embeddings(&mut g, tags, &ids)?;
        Ok(g.value(m).clone())
    }

    /// `ŷ_{p,t}` for every row of `tag_matrix`.
    pub fn score_tags(&self, poi: &EncodedPoi, tag_matrix: &Tensor) -> Result<Vec<f64>> {
        if tag_matrix.nrows() == 0 {
            return Err(Error::Empty("tag vocabulary"));
        }
        let mut g = Graph::new(&self.store);
        let c = self.content(&mut g, poi)?;
        let t = g.constant(tag_matrix.clone());
        let z = self.matcher.logits(&mut g, t, c)?;
        Ok(match_probabilities(g.value(z)))
    }

    pub fn predict_tags(&self, poi: &EncodedPoi, tag_matrix: &Tensor, pi: f64) -> Result<Vec<TagPrediction>> {
        rank_predictions(&self.score_tags(poi, tag_matrix)?, pi)
    }
}
