//! Brain-structure segmentation on coronal slice stacks.
//!
//! The crate contains a small reverse-mode differentiation engine
//! ([`graph`]), the network blocks and model built on it ([`nn`],
//! [`model`]), losses and schedule ([`loss`]), volume I/O and synthetic
//! phantoms ([`data`]), the SGD trainer with checkpointing ([`train`]) and
//! the evaluation battery ([`eval`]).

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use model::{build_model, count_params, AcenetConfig, ForwardOutput, ModelParams, Variant};
pub use params::{Mode, ParamStore, Session};
pub use tensor::Tensor;
