//! Caption generation from bags of semantic concepts, trained on text alone.
//!
//! The model reconstructs sentences from the concept words they contain
//! (attributes, objects, relations), so it never needs image-sentence pairs:
//! at inference time the same network consumes concept lists produced for an
//! image. The pipeline is
//!
//! concepts -> relationship explorer (multi-head attention)
//!          -> fixed-size relationship embedding (structured self-attention)
//!          -> attention LSTM decoder -> sentence
//!
//! Everything runs on a small reverse-mode tape engine ([`tape`]) in `f64`.
//! This crate is `no_std` (alloc required); all file and process IO lives in
//! the companion CLI crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod checkpoint;
pub mod concepts;
pub mod config;
pub mod decoder;
pub mod embedding;
pub mod gradcheck;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod text;
pub mod trainer;
pub mod vocab;

pub(crate) mod fmath;

pub use tape::{Tape, Tensor, TensorId, TensorError};
