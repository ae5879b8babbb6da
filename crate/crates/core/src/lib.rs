//! Tensor autodiff core for lightweight multi-scale tool segmentation networks.
//!
//! Everything in this crate works without `std` (an allocator is required).
//! The `std` feature enables `std::error::Error` plumbing and the `parallel`
//! feature lets the convolution kernels split work across a rayon pool; the
//! parallel kernels are bitwise equal to the sequential reference.
//!
//! Layout of the crate:
//! - [`tensor`]: rank-4 tensors in batch-channel-height-width order.
//! - [`kernels`]: direct-loop forward/backward kernels, generic over `f32`/`f64`.
//! - [`graph`]: define-then-run DAG with reverse-mode differentiation and a
//!   central finite-difference verifier.
//! - [`layers`]: PReLU, dropout and initializers.
//! - [`loss`]: class-balanced Dice loss, scale fusion, multi-scale Dice loss.
//! - [`arch`]: ToolNetMS, ToolNetH and an FCN-8s style baseline.
//! - [`optim`]: triangular cyclical learning rate and momentum SGD.
//! - [`metrics`]: confusion counts, mean IoU, mean DSC, balanced accuracy.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod arch;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
