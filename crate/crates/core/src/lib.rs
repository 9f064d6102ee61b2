//! Frequency-wise normalization with Bayesian branch weights for speaker
//! embedding networks, built on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod frontend;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod norm;
pub mod param;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use param::{ParamId, ParamKind, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
