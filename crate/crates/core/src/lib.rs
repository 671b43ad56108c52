//! A small, dependency-light GAN training engine for synthesizing retinal
//! OCT B-scans, together with a procedural phantom generator that stands in
//! for a clinical image database.
//!
//! Everything computes on [`Tensor`], a dense row-major array (NCHW for
//! images). Layers carry explicit forward and backward passes; there is no
//! autodiff graph. Training uses `f32`, gradient verification uses `f64`.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default). Results are bit-identical with and without it; see
//! [`par`].

pub mod dataio;
pub mod error;
pub mod gan;
pub mod lossopt;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Rng, Tensor};
