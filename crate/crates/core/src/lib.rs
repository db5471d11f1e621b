//! Audio-conditioned lyric line generation.
//!
//! A convolutional VAE learns latent codes for MEL spectrograms of short
//! music clips; a recurrent text VAE whose decoder receives a clip code at
//! every step generates lyric lines for that clip. The [`eval`] module holds
//! the latent-retrieval, word-KL and rank-biased-overlap analyses.

pub mod audio;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod latent;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod spec_vae;
pub mod tensor_io;
pub mod text_vae;

pub use error::{Error, Result};
