//! Channel estimation for sub-array XL-MIMO OFDM uplinks with grouped
//! code-division pilots and a Markov-random-field sparsity prior.

pub mod baselines;
pub mod channel;
pub mod error;
pub mod lmmse;
pub mod model;
pub mod mrf;
pub mod optimizer;
pub mod pilots;
pub mod rng;
pub mod turbo;

pub use error::{Error, Result};
