//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Graphs are built per mini-batch: every op computes its value as it is
//! appended and records what it needs for the reverse pass.

mod array;
mod check;
mod graph;
mod optim;
mod params;

pub use array::DenseArray;
pub use check::{check_params, finite_diff_check};
pub use graph::{sigmoid, Gradients, Graph, Var, LN_EPS};
pub use optim::{adam_update, Adam, AdamState, FreezeMap, ADAM_EPS, BETA1, BETA2};
pub use params::{uniform, ParamStore};
