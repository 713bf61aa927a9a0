//! Multi-modal POI tagging.
//!
//! The pipeline encodes a point of interest's texts and images, fuses them
//! into one content embedding and scores every candidate tag against it:
//!
//! * [`encoders`]: the shared text/tag encoder and the patch-based image backbone.
//! * [`die`]: domain-adaptive pretraining of the image backbone with masked
//!   tag prediction, image-tag contrast and image-tag matching.
//! * [`tif`]: cluster-based aggregation of each modality and attention fusion.
//! * [`matcher`]: POI-tag matching, thresholding and ranking.
//! * [`training`]: end-to-end training with matching and contrastive losses.
//! * [`metrics`]: multi-label classification and ranking metrics.
//! * [`datagen`]: a synthetic corpus generator with controllable signal.
//!
//! Everything runs on a small reverse-mode [`autograd`] engine in `f64`.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod datagen;
pub mod die;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sweep;
pub mod tif;
pub mod training;
pub mod vocab;

pub use config::{ModelConfig, Variant};
pub use error::{Error, Result};
