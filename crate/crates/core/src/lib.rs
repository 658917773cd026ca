//! Grid language modeling with next-2D-distribution prediction.
//!
//! A 1D causal Transformer reads `(token, own cell)` pairs in a random
//! order; a prediction head turns the causal prefix into token distributions
//! for every not-yet-revealed cell of the grid. Small synthetic grid
//! distributions with exact conditionals serve as ground truth.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod heads;
pub mod image;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod run;
pub mod sampler;
pub mod substrate;
pub mod tokenizer;
pub mod viz;

pub use error::{GridError, Result};
