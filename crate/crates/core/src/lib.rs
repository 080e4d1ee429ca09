//! Multi-resolution selective decoding for vision-language models.
//!
//! A query is answered over a pyramid of stages. Each stage sees only the
//! patches its predecessor attended to, attention is accumulated across
//! stages, and the final logits are contrasted against the coarser stages.

pub mod attention;
pub mod backends;
pub mod contrastive;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod pyramid;
pub mod secd;
pub mod selector;

pub use error::{Error, Result};
