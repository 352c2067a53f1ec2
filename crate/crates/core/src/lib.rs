//! Trajectory diffusion planning for offline reinforcement learning, with
//! training losses that keep generated trajectories consistent with learned
//! dynamics and rewards, and reward/dynamics guidance at sampling time.

// `!(x >= 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod planner;
pub mod training;
pub mod world;

pub use error::{Error, Result};
