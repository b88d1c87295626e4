//! Dense-tensor core for a grouped-attention, dual-scale mixture-of-experts block.
//!
//! Everything here is pure computation over `alloc` collections: the tensor
//! kernel and gradient tape ([`tensor`], [`tape`], [`gradcheck`]), grouped
//! sliding-window attention ([`gmha`]), the token evaluator ([`evaluator`]),
//! expert allocation and routers ([`routing`]), the shallow/deep expert
//! network ([`experts`]), the assembled block ([`model`]) and the synthetic
//! tasks used to exercise it ([`tasks`]).
//!
//! IO, wall-clock measurement, file formats and the command-line front end
//! live in the `dasg` crate.
#![no_std]

extern crate alloc;

pub mod error;
pub mod evaluator;
pub mod experts;
pub mod gmha;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod params;
pub mod rng;
pub mod routing;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use params::Parameters;
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
