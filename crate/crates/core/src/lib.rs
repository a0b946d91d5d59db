//! Weakly supervised semantic scene change detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`engine`]: a small reverse-mode autodiff engine with the layer
//!   primitives, the two pixel-wise losses and Adam.
//! * [`nn`]: the correlated siamese change detector, the silhouette-based
//!   semantic change labeler and their end-to-end combination.
//! * [`synthesis`]: training tuples for the labeler synthesized from plain
//!   segmentation data, plus morphological mask augmentation.
//! * [`dataio`]: netpbm codecs, panorama patch extraction, procedural toy
//!   scenes and k-fold splits.
//! * [`metrics`]: confusion matrices, F1 and mIoU.
//! * [`train`]: training loops and evaluation used by the CLI.

pub mod dataio;
pub mod engine;
mod error;
pub mod maps;
pub mod metrics;
pub mod kv;
pub mod nn;
pub mod synthesis;
pub mod eval;
pub mod train;

pub use error::{Error, Result};
pub use maps::{ChangeMask, LabelMap, UNLABELED};
