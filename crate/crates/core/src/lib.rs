//! Concept-aware conversation modelling.
//!
//! A hierarchical GRU encoder-decoder ([`hred`]) is trained first and then
//! probed by masking context words ([`probe`]); words whose removal lowers
//! the response likelihood form a concept bank. The concept-aware model
//! ([`focus`]) encodes those context concepts next to the utterances, predicts
//! response concepts with a decoder trained against a PMI-derived variational
//! distribution, and generates responses with a copy mechanism over them.

pub mod chat;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod focus;
pub mod hred;
pub mod numerics;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
