//! A small kernel-prediction network trained from scratch.
//!
//! The input is pixel-unshuffled by the shuffle factor, passed through a
//! residual trunk shared by all pyramid levels, then split into three heads
//! that shuffle back up to the resolution of their level and emit `k * k`
//! kernel planes.

mod adam;
mod layers;
mod model;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{
    conv2d_backward, conv2d_forward, depth_to_space, pixel_shuffle, pixel_unshuffle, relu, relu_backward,
    residual_block, residual_block_backward, residual_block_traced, space_to_depth, BlockTrace, ConvLayer,
    FeatureMap, ResidualBlock,
};
pub use model::{
    lpkpn_backward, lpkpn_forward, lpkpn_forward_traced, ForwardTrace, Head, LpkpnParams, ModelConfig,
    INPUT_SCALE,
};
pub use train::{
    dataset_loss, dihedral, loss_and_grad, loss_l2, predict, train_from, train_toy, TrainConfig, TrainOutcome,
};
