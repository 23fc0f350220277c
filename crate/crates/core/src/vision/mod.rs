//! Image → patch-feature pipeline: aspect-ratio tiling, patch extraction and
//! a small trainable encoder.

mod encoder;
mod raster;
mod tiling;

use thiserror::Error;

use crate::tensor::TensorError;

pub use encoder::{encode, encode_graph, image_to_patches, patchify, EncoderParams, EncoderVars, PatchBatch, PatchFeatures, PatchPos};
pub use raster::Raster;
pub use tiling::{all_grids, coverage, fit_to_canvas, select_grid, tile_image, TileGrid, TilingConfig};

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
