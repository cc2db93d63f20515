//! Continual user-representation learning over a temporal convolutional
//! backbone, with relation-aware task-specific soft masks, pseudo-label
//! knowledge retention and relation-aware user sampling.

pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod dataset;
pub mod engine;
pub mod metrics;
pub mod task_mask;
pub mod error;
pub mod experiment;

pub use error::{Error, Result};
