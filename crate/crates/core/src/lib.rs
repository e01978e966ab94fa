//! Discrete diffusion samplers trained with off-policy second-moment
//! objectives, and data-to-energy Schrödinger bridges fitted by iterative
//! proportional fitting.

pub mod bridge;
pub mod diffusion;
pub mod energy_rpc;
pub mod error;
pub mod nn;
pub mod mcmc;
pub mod metrics;
pub mod objectives;
pub mod replay;
pub mod rng;
pub mod targets;
pub mod training;

pub use error::{Error, Result};
