//! Spiking neural networks with multiple-threshold firing.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tape`]), PLIF
//! neurons with single- and multiple-threshold firing ([`neuron`]), the layers
//! and VGG/ResNet-style networks built from them ([`layers`], [`model`]),
//! dataset ingestion ([`data`]), the training loop ([`train`]) and a
//! multiplication-free inference path ([`mfree`]) that is checked against the
//! dense one.

pub mod checkpoint;
pub mod config;
pub mod counter;
pub mod data;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod mfree;
pub mod model;
pub mod neuron;
pub mod real;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
