//! Structured spatial attention for convolutional feature maps.
//!
//! The central piece is [`attention::AttentionRnnLayer`]: a pair of diagonal
//! LSTMs sweep a skewed feature map top-left to bottom-right and top-right to
//! bottom-left, each location receives a Gaussian over its attention value,
//! and the two directional Gaussians are merged and decoded into a mask.
//! Everything runs on a small double-precision tape autodiff in [`tensor`].
//!
//! Around the layer the crate provides a block (downsampled) variant,
//! local and global baselines, a procedural colored-digit benchmark, an
//! attribute-prediction network with training and evaluation, and a set of
//! brute-force oracles used by the test suites.

pub mod attention;
pub mod baseline;
pub mod block;
pub mod datagen;
pub mod error;
pub mod export;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod skew;
pub mod tensor;

pub use error::{Error, Result};
