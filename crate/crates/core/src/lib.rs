//! Transformer → attention/SSM hybrid conversion by distillation, at desk
//! scale.
//!
//! The crate trains a small grouped-query-attention transformer teacher on
//! synthetic tasks, scores its layers (leave-one-out ablation and short
//! replacement distillation runs), swaps the least important attention
//! mixers for selective state-space (Mamba-style) mixers initialized from the
//! attention weights, distills the hybrid against the teacher with a
//! reverse-KL objective in stages, and benchmarks decode cost.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod graph;
pub mod hybridize;
pub mod importance;
pub mod layout;
pub mod mamba;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::Tensor;
