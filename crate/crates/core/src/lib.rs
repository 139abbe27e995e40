//! Contextual (transformer) blocks trained on in-context linear regression,
//! and the machinery to rewrite the effect of the context as a rank-1 update
//! of the first MLP weight matrix plus a shift of the last MLP bias.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod implicit;
pub mod model;
pub mod taskgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
