//! SDA-Net: a single-character OCR network combining channel and edge
//! attention, gated context encoding and skip-feature fusion, trained with a
//! composite consistency objective.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. Everything here is a pure function of its inputs and seeds;
//! file IO and the command-line driver live in the `sdanet` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod kv;
pub mod loss;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use kernel::{Graph, Precision, Scalar, Tensor, Var};
pub use rng::Rng;
