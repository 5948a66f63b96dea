//! Effective-hypersurface reconstruction for bias-free ReLU convolutional
//! networks.
//!
//! A bias-free network built from convolutions, average pools, scalar
//! rescaling and positively homogeneous activations is piecewise linear with
//! no offset: once the activation gates are frozen at some evaluation point,
//! every feature map unit is an inner product of the input with a fixed
//! tensor. This crate computes those tensors by replaying the frozen linear
//! map in reverse and provides tooling around them: verification, rendering,
//! training and adversarial experiments.

pub mod adjoint;
pub mod adversarial;
pub mod analysis;
pub mod archive;
pub mod backmap;
pub mod error;
pub mod network;
pub mod render;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
