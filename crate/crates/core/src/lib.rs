//! Query-debiased video moment retrieval and highlight detection.

pub mod alignment;
pub mod autodiff;
pub mod debias;
pub mod detrhead;
pub mod error;
pub mod exec;
pub mod featurestore;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
