//! Capacity planning and deterministic simulation of autoregressive
//! language-model serving on a single accelerator or a tensor-parallel group.

pub mod capacity;
pub mod costmodel;
pub mod engine;
pub mod error;
pub mod hardware;
pub mod model_catalog;
pub mod replication;
pub mod sweep;
pub mod workload;

pub use error::{Error, Result};
