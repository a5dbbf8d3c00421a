//! Layers with explicit forward caches and backward passes.

mod conv;
mod elementwise;
mod linear;
mod norm;
mod pool;

pub use conv::{Conv3d, ConvCache};
pub use elementwise::{
    concat_channels, relu, relu_backward, sigmoid, split_channels, upsample2, upsample2_backward, Dropout, DropoutCache,
};
pub use linear::{Linear, LinearCache};
pub use norm::{BatchNorm, BatchNormCache};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool3d, MaxPoolCache};
