//! Low-rank mixture-of-experts continual learning for image segmentation.
//!
//! The crate bundles a small deterministic tensor/autograd engine, stackable
//! low-rank adapters, a transformer segmentation backbone whose FFN and
//! attention layers host per-task experts, task-level and class-level gating,
//! a continual trainer with bitwise freeze audits, synthetic benchmarks, and
//! a self-describing checkpoint format.

pub mod autograd;
pub mod checkpoint;
pub mod checksum;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gating;
pub mod lora;
pub mod model;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Param, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Rng, Tensor};
