//! Lip-to-speech synthesis with distribution-matched latent spaces.
//!
//! A visual encoder maps silent lip crops to a per-timestep Gaussian; a
//! frozen content encoder maps speech to another; KL losses (global over the
//! sequence, local over random segments) tie the two together so that a
//! decoder trained on content samples can decode lip samples at inference.
//! The decoder is conditioned on a speaker embedding, and training adds a
//! WGAN-GP critic plus a voice-similarity loss. Everything runs on a
//! deterministic synthetic audio-visual corpus so the whole pipeline is
//! testable on a single machine.
//!
//! See the `examples/` directory for runnable entry points per capability,
//! or the `lipvox` binary for the command-line interface.

pub mod audio;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod embedders;
pub mod error;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
