pub mod baselines;
pub mod error;
pub mod fusion;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod sinkhorn;
pub mod taskgen;
pub mod workspace;

pub use error::{Error, Result};
