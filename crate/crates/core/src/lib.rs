//! Out-of-distribution node detection with a latent graph energy model.
//!
//! A multi-hop encoder trained contrastively produces node representations; an
//! energy head fitted by maximum likelihood with Langevin sampling scores each
//! node, higher meaning more likely out of distribution.

pub mod baselines;
pub mod contrastive;
pub mod diff;
pub mod ebm;
pub mod encoder;
mod error;
pub mod graph;
pub mod metrics;
pub mod oodbench;
pub mod search;
pub mod trainer;

pub use error::{Error, Result};
