//! Adaptive image tokenizer: overlapping patch partitioning, a miniature
//! attention encoder with learnable global tokens, conditional-entropy token
//! filtering, dual vector-quantization codebooks, mask-padded decoding, and the
//! information-theory toolbox used to check it.

pub mod cli;
pub mod dtf;
pub mod error;
pub mod imagegrid;
pub mod infotheory;
pub mod labbench;
pub mod nanonet;
pub mod pipeline;
pub mod quantizer;

pub use error::{Error, Result};
