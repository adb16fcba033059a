//! Conditional sequence GAN for query expansion.
//!
//! A transformer encoder-decoder generator proposes expansion terms for a
//! search query, steered by a per-query condition vector; an LSTM
//! discriminator separates real documents from expanded queries and its
//! scores drive policy-gradient fine-tuning of the generator.

pub mod adversarial;
pub mod checkpoint;
pub mod conditions;
pub mod corpus;
pub mod discriminator;
pub mod embeddings;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod synthetic;
pub mod tape;
pub mod workflow;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of a byte string. Used for artifact compatibility checks.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
