//! Non-crossing quantile (NQ) networks.
//!
//! A dense ReLU network produces a raw head vector per input; a quantile head
//! maps it to K non-crossing conditional quantile estimates. The crate covers
//! the head algebra and its exact gradients, pinball and quantile-Huber
//! losses, simulation models with known true quantiles, a quantile-regression
//! trainer with replication support, and a fitted distributional RL loop on a
//! toy MDP with a dynamic-programming oracle.

pub mod drl;
pub mod error;
pub mod heads;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod simdata;
pub mod trainer;

pub use error::{Error, Result};
