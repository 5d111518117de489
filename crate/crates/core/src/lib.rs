//! Personalized query auto-completion with an adaptable character-level LSTM.
//!
//! The crate is organised around the life cycle of a completion model:
//!
//! - [`corpus`]: query-log ingestion, vocabulary, user grouping, splits, prefix sampling
//! - [`model`]: the coupled-gate, layer-normalized LSTM and its three recurrent-layer
//!   variants (unadapted, concat, factor)
//! - [`train`]: backpropagation, Adam training and Adadelta online user updates
//! - [`complete`]: beam-search decoding with cached per-user weights, and the
//!   most-popular-completion baseline
//! - [`eval`]: MRR under sequential online adaptation and the derived reports
//! - [`archive`]: the single-file model format
//! - [`synthetic`]: generator for small personalized corpora used in tests and demos

pub mod archive;
pub mod complete;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod synthetic;
pub mod train;

mod util;

pub use error::{Error, Result};
