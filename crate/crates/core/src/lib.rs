//! FH-Seg: a residual encoder-decoder segmentation network with full-scale
//! skip connections and hierarchical soft attention gates, built on a small
//! reverse-mode autodiff engine in double precision.
//!
//! * [`tensor`] - dense tensors, the recording [`tensor::Graph`], finite-difference checker.
//! * [`net`] - model configuration, construction, forward pass and parameter counting.
//! * [`data`] - procedural vessel cross-section samples, augmentation, patching, splits.
//! * [`train`] - loss, Adam, the training loop, evaluation metrics and ablation runs.
//! * [`persist`] - run configuration files and checkpoints.

pub mod data;
pub mod error;
pub mod net;
pub mod persist;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
