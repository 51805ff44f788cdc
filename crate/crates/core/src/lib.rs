//! Tree-gated mixtures of experts for cascaded landmark regression.
//!
//! A small reverse-mode differentiation engine ([`tape`]) carries every
//! layer: CNN experts over shape-indexed patches ([`representation`]),
//! fully connected regression experts ([`moe`]), softmax and soft-tree gates
//! ([`gates`]), a pose estimator ([`pose`]) and the cascade that chains them
//! ([`cascade`]). [`synthdata`] renders a pose-varying synthetic benchmark
//! and [`metrics`] scores predictions on it.

pub mod cascade;
pub mod checkpoint;
pub mod error;
pub mod gates;
pub mod gradcheck;
pub mod metrics;
pub mod moe;
pub mod optim;
pub mod params;
pub mod pose;
pub mod representation;
pub mod synthdata;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
