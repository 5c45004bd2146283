//! Online knowledge distillation with feature fusion and self-distillation.

pub mod config;
pub mod data;
pub mod distill_math;
pub mod evaluation;
pub mod error;
pub mod exec;
pub mod networks;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
