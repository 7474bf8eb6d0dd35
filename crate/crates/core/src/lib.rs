//! Fully dynamic almost-maximal matching with deterministic worst-case step budgets.

pub mod engine;
pub mod error;
pub mod fallback;
pub mod games;
pub mod graph;
pub mod harness;
pub mod oracle;
pub mod ostree;
pub mod params;
pub mod procedures;
pub mod seq;
pub mod transform;
pub mod verify;

pub use error::{Error, Result};
