//! The three networks: a correlated siamese change detector, a
//! silhouette-based semantic labeler and a direct semantic change network
//! on the detector's trunk.

mod checkpoint;
mod config;
mod layout;
mod model;

pub use checkpoint::{config_path, decode_weights, encode_weights, load_weights, load_weights_as, save_weights, MAGIC, VERSION};
pub use config::{Architecture, CscdNetConfig, CsscdNetConfig, EncoderConfig, ModelKind, SscdNetConfig};
pub use layout::{ConvLayer, DecoderLayout, EncoderLayout, Layout, ResBlock};
pub use model::{Mode, Model, Session, SplitLogits, BN_EPS, BN_MOMENTUM};

use crate::engine::Tensor;
use crate::maps::ChangeMask;
use crate::error::{Error, Result};

/// Stack change masks into a `[N, 1, H, W]` tensor of zeros and ones.
pub fn mask_tensor(masks: &[ChangeMask]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::invalid("mask_tensor", "empty batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::shape("mask_tensor", format!("{}x{} vs {w}x{h}", m.width(), m.height())));
        }
        data.extend(m.data().iter().map(|&v| v as f32));
    }
    Tensor::new(vec![masks.len(), 1, h, w], data)
}
