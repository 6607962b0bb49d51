//! Particle solvers for mean field games with common noise.

pub mod bsde;
pub mod error;
pub mod forward_sim;
pub mod lq_oracle;
pub mod measures;
pub mod mfg_solvers;
pub mod model;
pub mod nplayer;

pub use error::{Error, Result};
