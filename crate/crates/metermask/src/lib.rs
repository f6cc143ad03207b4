//! Privacy-preserving sparse release of smart-meter load profiles.
//!
//! The sanitizer learns, per time step, the probability of releasing a
//! consumption sample so that the released sparse sequence supports accurate
//! reconstruction while revealing as little as possible about a binary
//! private attribute (household occupancy). Three recurrent networks are
//! trained against each other: a releaser producing a soft release mask, a
//! utility network reconstructing consumption from the released data, and an
//! adversary inferring the private attribute from it. Evaluation compares
//! the learned mechanism against uniform and random down-sampling with an
//! independently trained attacker, reconstruction error, released-sample
//! rate, and a k-NN mutual-information estimate.
//!
//! See the `examples/` directory for runnable entry points covering each
//! capability, or the `metermask` binary for the batch CLI.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod graph;
pub mod losses;
pub mod lstm;
pub mod mechanism;
pub mod metrics;
pub mod optim;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use graph::{Graph, NodeId};
pub use tensor::{Tensor, TensorError};
