//! Block-allocated spatial latent memory generative model.
//!
//! An episode of images is encoded and written into a deterministic
//! `channels x height x width` memory. Each image addresses that memory with
//! stochastic 3-parameter keys; a spatial transformer reads the addressed
//! sub-blocks, and a learned prior over the latent code is built from those
//! reads. Training maximizes the memory-conditional evidence lower bound.

pub mod diffcore;
pub mod distributions;
pub mod stn;
pub mod model;
pub mod objective;
pub mod data;
pub mod trainer;

#[cfg(test)]
extern crate self as kpp_core;

#[cfg(test)]
#[path = "../tests/common/fd.rs"]
mod fd;
