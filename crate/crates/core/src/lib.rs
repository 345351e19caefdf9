//! Parameter-efficient universal metric learning.
//!
//! A frozen ViT-style encoder is extended with stochastic bottleneck adapters
//! and a conditional prompt pool, trained with proxy- or pair-based metric
//! losses on a union of heterogeneous datasets, and evaluated with
//! per-dataset, unified and harmonic retrieval accuracy.

pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod params;
pub mod peft;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{cosine_similarity, Tape, Tensor, Var};
