//! Desk-scale discrete image tokenizer with multimodal autoregression.

pub mod autograd;
pub mod backbones;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod lm;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod qformer;
pub mod revq;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod vq;

pub use error::{Result, SeedError};
