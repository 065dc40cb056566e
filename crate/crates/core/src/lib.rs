//! Risk prediction over time-ordered visit records, augmented with synthetic
//! visit sequences drawn from a history-conditioned diffusion model.
//!
//! The pipeline embeds each visit ([`embedder`]), encodes the sequence with an
//! LSTM ([`encoder`]), generates synthetic visit embeddings with an
//! attention-fused denoising diffusion chain ([`diffusion`]), and trains a
//! shared risk head on both the original and synthetic sequences
//! ([`predictor`], [`trainer`]).

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kv;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod params;
pub mod predictor;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
