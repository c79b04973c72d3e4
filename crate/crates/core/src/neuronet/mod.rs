//! Single-output 3D residual segmentation network.
//!
//! A ResNet encoder (initial convolution, then per scale a strided
//! convolution and pre-activation residual units) feeds an FCN upscore
//! decoder: 1x1x1 score convolutions at every scale, fused by linear
//! upsampling and addition, followed by a softmax. Forward and backward
//! passes are written by hand over channels-last tensors and are generic
//! over the scalar type, so gradient checks can run in f64 while training
//! runs in f32.

mod adam;
mod checkpoint;
mod config;
mod loss;
mod net;
mod ops;
mod params;
mod tensor;
mod train;

use std::fmt::Debug;
use std::iter::Sum;
use std::path::PathBuf;

use thiserror::Error;

pub use adam::{optimizer_step, AdamState};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, MAGIC};
pub use config::{AdamConfig, Init, NetConfig, KERNEL};
pub use loss::{loss, loss_gradient, LossValue, PROB_FLOOR};
pub use net::{backward, forward, Cache, Forward, Gradients, Mode};
pub use params::{init_params, param_layout, uniform_params, NetParams, ParamKind};
pub use tensor::Tensor;
pub use train::{
    pad_amounts, predict_volume, recalibrate_batch_stats, train, volume_tensor, write_loss_trace, Batch, Prediction,
    TrainConfig,
};

/// Floating-point element type of tensors and parameters.
pub trait Scalar: num_traits::Float + Send + Sync + Default + Debug + Sum + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("layer `{layer}` expects {expected} input channels, found {found}")]
    ChannelMismatch { layer: String, expected: usize, found: usize },
    #[error("spatial dims {dims:?} are not multiples of {multiple:?}")]
    IndivisibleShape { dims: [usize; 3], multiple: [usize; 3] },
    #[error("stale forward cache: {0}")]
    StaleCache(String),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("corrupt checkpoint record: {0}")]
    CorruptRecord(String),
    #[error("training data ran out after {0} steps")]
    DataExhausted(usize),
    #[error(transparent)]
    Volio(#[from] crate::volio::VolioError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
