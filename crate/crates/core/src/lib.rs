//! Desk-scale unseen object instance segmentation toolkit.
//!
//! The pipeline predicts a foreground mask and a centroid heatmap per image,
//! turns heatmap peaks into point prompts, asks a promptable mask proposer for
//! four hierarchical candidate masks per prompt, re-scores the candidates with
//! a small residual network and keeps the best mask per prompt after
//! suppression and area filtering.
//!
//! The promptable segmenter is abstracted behind [`proposer::MaskProposer`];
//! the bundled [`proposer::OracleProposer`] synthesises proposals from ground
//! truth with controllable ranking bias and noise.

pub mod error;
pub mod hdnet;
pub mod hpg;
pub mod hpghead;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod proposer;
pub mod rng;
pub mod synthgen;
pub mod tinynn;

pub use error::{Error, Result};
pub use mask::{
    mask_area, mask_centroid, mask_iou, rle_decode, rle_encode, BinaryMask, Centroid, ImageSize,
    MaskRecord, PixelPoint,
};
pub use image::RgbImage;
pub use synthgen::{Scene, SceneConfig};
