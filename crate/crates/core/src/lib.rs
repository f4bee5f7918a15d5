//! Deterministic desk-scale simulator of federated learning under label
//! distribution skew.
//!
//! The crate layers up from a reverse-mode tensor engine ([`tensor`],
//! [`params`]) through datasets and partitioning ([`data`]), the three model
//! roles ([`models`]), round-based federated orchestration ([`fl`]), the
//! two-stage generative protocol ([`fedmgd`]), and evaluation/emission
//! ([`metrics`]). [`config`] and [`runner`] expose the declarative
//! experiment surface the CLI drives.

pub mod config;
pub mod data;
pub mod error;
pub mod fedmgd;
pub mod fl;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod params;
pub mod runner;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
