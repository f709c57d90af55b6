//! Weakly-supervised audio-visual video parsing.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`],
//! [`optim`]), the dataset schema and file formats ([`data`]), the attention
//! building blocks ([`attention`]), the temporal pseudo-label generator
//! ([`pseudolabel`]), the hybrid-attention inference model ([`han`]), the
//! training objectives ([`objectives`]), the evaluation protocol
//! ([`metrics`]) and the orchestration of the two training stages
//! ([`pipeline`]).

pub mod attention;
pub mod data;
pub mod error;
pub mod han;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pseudolabel;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::{Elem, Tensor};
