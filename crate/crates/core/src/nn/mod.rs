//! Shared encoder with a mask decoder and a classifier head.
//!
//! * Encoder: 3×3 convolutions with stride 2 and dilation cycling through
//!   1, 2, 4, each followed by batch norm and ReLU, then a dense layer to
//!   the embedding.
//! * Decoder: dense + ReLU to a small grid, then blocks of 2×2 stride-2
//!   transposed convolution, batch norm, an additive nearest-upsampled skip
//!   and ReLU, then a 3×3 convolution to one logit per pixel.
//! * Classifier: four dense + batch norm + ReLU layers and a dense output.
//!
//! Parameter names look like `encoder.conv0.weight` or
//! `decoder.block2.bn.gamma`; dense weights are `(in, out)`.

mod adam;
mod checkpoint;
mod config;
mod model;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use config::{ModelConfig, ModelMode, BN_EPS, BN_MOMENTUM, DILATIONS};
pub use model::{
    batch_norm_layers, param_count, param_specs, BnMode, Bound, Forward, ModelParams, ParamSpec,
    RunningStats,
};
