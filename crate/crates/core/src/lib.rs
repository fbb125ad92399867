//! Temporal fusion of cooperative bird's-eye-view embeddings.
//!
//! The crate covers the whole experimental loop: a synthetic multi-agent
//! world with occlusion and communication failures, a small cooperative base
//! model whose decoder is frozen after pretraining, a bit-exact embedding
//! cache, the temporal fusion module with its trainer, and the evaluation and
//! ablation protocols.

pub mod base;
pub mod bev;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod fsutil;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod real;
pub mod store;
pub mod temporal;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use real::Real;
