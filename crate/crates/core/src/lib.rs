//! Desk-scale silent-speech recognition: EMG features, audio target transfer,
//! transformer transduction and recognition, beam search, conservative
//! correction and WER scoring.

pub mod acoustic;
pub mod asr;
pub mod align;
pub mod container;
pub mod corpus;
pub mod correction;
pub mod error;
pub mod eval;
pub mod nn;
pub mod signals;

pub use error::{Error, Result};
