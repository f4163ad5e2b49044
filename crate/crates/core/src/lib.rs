//! Prototype rectification for few-shot classification over embedding vectors.
//!
//! The crate evaluates N-way K-shot episodes with a cosine-similarity
//! prototype classifier and two transductive bias-diminishing steps:
//! a cross-class feature shift that aligns the query cloud with the
//! support cloud, and an intra-class rectification that augments each
//! class with its most confidently pseudo-labeled queries and rebuilds
//! the prototype as a confidence-weighted sum.
//!
//! Alongside the classifier it ships the matching theory tooling (an
//! expected-cosine lower bound, Monte Carlo verification, and a
//! first-order accuracy curve in the pseudo-label budget), an episodic
//! benchmark harness with confidence intervals and mAP, and a desk-scale
//! cosine-classifier trainer with analytically derived, finite-difference
//! checked gradients.

pub mod episodes;
pub mod error;
pub mod featurestore;
pub mod harness;
pub mod protonet;
pub mod rectify;
pub mod theory;
pub mod trainer;

mod streams;

pub use error::{Error, Result};

/// Vectors with L2 norm below this are rejected wherever a direction is
/// needed; dividing by them would manufacture NaN directions.
pub const MIN_VECTOR_NORM: f64 = 1e-12;
