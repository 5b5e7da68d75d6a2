//! Desk-scale attention-based encoder-decoder sequence transduction with
//! intermediate-layer-output regularization and hybrid CTC/attention
//! decoding, on a synthetic corpus.
//!
//! The crate is generic over the float type: `f32` is the training default,
//! `f64` backs the finite-difference gradient checks.

pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fwd;
pub mod gradcheck;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
