//! Spectral rotary position encoding lab.
//!
//! A small decoder-only transformer whose query/key rotation is either the
//! fixed geometric RoPE basis or a learnable spectral basis (frequency,
//! amplitude, phase per dimension pair), trained on three formal-language
//! tasks, with diagnostics over the learned basis.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod rope;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Result, SrplError};
