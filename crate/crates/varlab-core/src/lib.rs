//! Deterministic building blocks for studying weight-variance control in
//! decoder-only transformers: seeded sampling, init schemes, in-training
//! rescaling, AdamW, and the telemetry that observes all of it.
//!
//! Everything here is `no_std`-compatible (with `alloc`); float math goes
//! through `libm` so results are bit-identical across platforms and feature
//! combinations.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod optim;
pub mod rescale;
pub mod rng;
pub mod telemetry;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Prng;
pub use tensor::{Dtype, Element, Tensor};
