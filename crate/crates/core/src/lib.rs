//! Off-policy external memory for contextual biasing of speech encoders.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`memory`]: the key/value store built from a text catalog, with merge
//!   and a pinned binary file format;
//! - [`embedders`]: deterministic audio-proxy keys and text values;
//! - [`ann`]: exact and OPQ + PQ + HNSW nearest-neighbour retrieval;
//! - [`fusion`]: the KNN fusion layer with analytic gradients;
//! - [`encoder`]: a toy encoder stack, synthetic rare-token task and the
//!   experiments built on it.

pub(crate) mod binio;
pub mod ann;
pub mod config;
pub mod embedders;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod memory;

pub use error::{Error, Result};
