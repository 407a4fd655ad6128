//! Declarative probabilistic programming over open-universe Bayesian
//! networks, with single-site Metropolis-Hastings driven by compiled
//! neural proposals conditioned on Markov blankets.

pub mod autodiff;
pub mod compile;
pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod graph;
pub mod infer;
pub mod models;
pub mod nn;
pub mod seed;

pub use distributions::{Distribution, Support, Transform};
pub use error::{Error, Result};
pub use graph::{ancestral_sample, Address, Env, Model, NodeState, Value, World, WorldDiff};
