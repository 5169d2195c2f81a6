//! Latent state-space world models trained with forward prediction plus
//! cycle-consistent retracing, adaptive truncation of irreversible
//! transitions, and an imagination-based actor-critic.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod agent;
pub mod cli;
pub mod envs;
pub mod losses;
pub mod numcore;
pub mod trainer;
pub mod truncation;
pub mod worldmodel;

pub use error::{Error, Result};
