//! Yin-Yang convolutional network core: a small reverse-mode autograd engine
//! over dense NCHW tensors, the layers and composite blocks the network uses,
//! model assembly with parameter accounting, and the full training recipe
//! (AdamW, one-cycle schedule, gradient clipping, weight EMA, lr-coupled
//! weight decay).
//!
//! The crate is `no_std` + `alloc`; everything IO-related (datasets,
//! checkpoints, CLI) lives in the companion `yynet` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod blocks;
pub mod error;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor};
