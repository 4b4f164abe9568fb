//! Phone-level spoken language understanding.
//!
//! Models operate on phone transcripts (space-separated IPA symbols, as
//! emitted by a universal phone recognizer) and classify utterance intent.

pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fsio;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod train_eval;
pub mod transformer;

pub use error::{Error, Result};
