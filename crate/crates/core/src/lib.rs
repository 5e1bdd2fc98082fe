//! Non-linear invariant risk minimization for continuous trajectory
//! generation: a small second-order autodiff engine, the trajectory
//! decoder / observation encoder / critic families, every training
//! objective, a synthetic multi-environment benchmark and the staged
//! training procedures built on them.
//!
//! The crate is `no_std` (with `alloc`); file formats, the command line and
//! run orchestration live in the `nirm` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(missing_debug_implementations)]

extern crate alloc;

pub mod data;
pub mod engine;
pub mod fdcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod train;

pub use engine::{EngineError, Graph, Var};
pub use tensor::{ParameterSet, Tensor, TensorError};
