//! Trainable networks, reverse-mode differentiation and optimization.

pub mod checkpoint;
pub mod nets;
pub mod ops;
pub mod params;
pub mod tape;

pub use nets::{Model, ModelConfig};
pub use params::{AdamConfig, ParamStore};
pub use tape::{Tape, Var};
