//! Diffusion and consistency-model copilots for shared-autonomy control.

pub mod data;
pub mod ddpm;
pub mod envs;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod forward;
pub mod nn;
pub mod oracle;
pub mod persistence;
pub mod schedule;
pub mod student;
pub mod teacher;

pub use error::{Error, Result};
