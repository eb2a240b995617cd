//! Minimal neural-network toolkit on top of `candle-core` tensors.

mod conv;
mod fused;
mod layers;
mod optim;
mod params;

pub use conv::{conv2d_nhwc, im2col};
pub use fused::{bias_add, group_norm_nhwc, upsample2_nhwc};
pub use layers::{avg_pool2, log_softmax_last, softmax_last, upsample2, AttentionBlock, Conv2d, GroupNorm, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
