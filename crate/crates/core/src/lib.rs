//! Binary affect classification from animal facial images using linear
//! probes over frozen pretrained vision backbones.
//!
//! The crate is organized along the pipeline:
//!
//! - [`ingest`]: frame manifests, video frame extraction, dataset summaries
//! - [`preprocess`]: face localization, cropping, training augmentations
//! - [`backbone`]: the four frozen feature extractors (ResNet-50, ViT-S/16, ViT-S/8)
//! - [`probe`]: linear probe, softmax cross-entropy, Adam, training loop
//! - [`experiment`]: subject-disjoint splits, metrics, run orchestration
//! - [`explain`]: Eigen-CAM saliency and overlays
//! - [`report`]: comparison tables and training-curve plots

// `!(x > y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod config;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod imaging;
pub mod ingest;
pub mod preprocess;
pub mod probe;
pub mod report;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
