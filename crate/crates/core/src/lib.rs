//! Exploration with mutual-information state and action embeddings.
//!
//! State observations and actions are embedded into a shared `d`-dimensional
//! space where transitions are forced to be additive,
//! `φ(s') ≈ φ(s) + ψ(a) + S(s, a)`, while two Jensen-Shannon lower bounds keep
//! the embeddings informative about each other. The residual of that linear
//! model (or a kernel density in embedding space) is then used as an
//! intrinsic reward for a policy-gradient agent.

pub mod agent;
pub mod emi;
pub mod envs;
mod error;
pub mod mi;
pub mod model;
pub mod numcore;

pub use error::{Error, Result};
