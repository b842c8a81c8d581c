//! Offline model-based reinforcement learning with augmented world models.
//!
//! The pipeline is: collect a static dataset on a toy environment
//! ([`env`]), fit a probabilistic ensemble ([`world_model`]), train a
//! context-conditioned soft actor-critic inside the model on augmented
//! transitions ([`augment`], [`sac`], [`trainer`]), then deploy zero-shot on
//! modified dynamics while inferring the context online ([`adapter`]).
//! [`eval`] holds the experiment protocols and significance testing.

pub mod adapter;
pub mod augment;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod sac;
pub mod stats;
pub mod trainer;
pub mod types;
pub mod world_model;

pub use error::{Error, Result};
pub use rng::Rng;
pub use types::{ContextVector, Dataset, NormStats, Transition};
