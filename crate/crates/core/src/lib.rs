pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod rope;
pub mod masking;
pub mod synth;
pub mod flow;
pub mod model;
pub mod metrics;
pub mod trajectory;
pub mod datapipe;
pub mod cli;
