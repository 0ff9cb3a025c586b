//! Hierarchical-organization learning for connectome classification.
//!
//! The crate covers the whole pipeline: connectivity datasets
//! ([`data`]), the Sparsemax kernel ([`sparsemax`]), the three-stage attention
//! network ([`model`]) trained with a combined classification, orthogonality
//! and consistency objective ([`losses`], [`train`]), cross-validated metrics
//! ([`eval`]) and attention-based sub-network analysis ([`interpret`]).

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod interpret;
pub mod losses;
pub mod model;
pub mod seed;
pub mod sparsemax;
pub mod train;

pub use error::{Error, Result};
