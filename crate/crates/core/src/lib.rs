//! Concept-based explanations for convolutional classifiers of symbolic music.
//!
//! The crate covers the full path from MIDI files to explanation reports:
//!
//! * [`midi`] / [`roll`] — parse standard MIDI files into note lists and bin
//!   them into 88-pitch piano rolls with a fixed time step.
//! * [`synth`] — seeded generators for synthetic concept datasets
//!   (Alberti-bass figures, uniform random notes).
//! * [`model`] — a small convolutional classifier over piano rolls, with
//!   access to hidden activations and logit gradients at any block.
//! * [`cav`] — supervised concept testing: concept activation vectors,
//!   directional sensitivities and significance-tested concept scores.
//! * [`factorization`] — non-negative Tucker decomposition and non-negative
//!   matrix factorization of activation tensors.
//! * [`concepts`] — unsupervised concepts from factorization: channel
//!   dictionaries, presence heatmaps, excerpt ranking and fidelity.
//! * [`render`] — SVG/PNG rendering of rolls and heatmap overlays, plus
//!   MIDI export.
//! * [`prt`] — the on-disk tensor container used by the command-line tools.
//!
//! Numeric code is generic over the scalar type through the [`Scalar`]
//! trait; `f32` is the working precision for training and inference and
//! `f64` is used where tests compare against high-precision references.
//! All randomness flows through explicitly seeded generators, so every
//! result in the crate is reproducible from its configuration.

pub mod cav;
pub mod concepts;
pub mod factorization;
pub mod midi;
pub mod model;
pub mod prt;
pub mod render;
pub mod roll;
pub mod stats;
pub mod synth;

mod scalar;

pub use scalar::Scalar;

/// Piano roll at working precision, as consumed by [`Model`].
pub type PianoRoll = roll::Roll<f32>;

/// Convolutional classifier at working precision.
pub type Model = model::Cnn<f32>;
