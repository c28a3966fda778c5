//! Differentiable architecture search over asymmetric 3D convolutions for
//! hyperspectral pixel classification.
//!
//! The pipeline runs in two stages. A supernet holding every candidate
//! operation and width path is trained with alternating updates of its
//! weights and of the architecture logits; the logits are then discretized
//! into a [`genotype::Genotype`], which is built as a compact network, trained
//! from scratch and applied to whole scenes by tiled inference.

pub mod autodiff;
pub mod checkpoint;
pub mod compact;
pub mod data;
pub mod error;
pub mod genotype;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod search;
pub mod search_space;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
