//! Multimodal hierarchical variational autoencoder engine.

pub mod data;
pub mod distributions;
pub mod evaluator;
pub mod model;
pub mod mrd;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod trainer;
