//! Spectral Lipschitz and averagedness certificates for unrolled forward-backward
//! networks with periodic blur, gradient regularization and leaky bias.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod cli;
pub mod coeffs;
pub mod config;
pub mod error;
pub mod network;
pub mod pgm;
pub mod probe;
pub mod spectral;

pub use error::{Result, StabError};
