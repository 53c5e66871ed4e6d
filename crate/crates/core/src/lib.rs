//! Style-aware early-layer logit revision for layered multimodal decoders,
//! plus the CHAIR and POPE object-hallucination metrics used to evaluate it.

pub mod error;
pub mod revision;
pub mod tensor;

pub use error::{Error, Result};
pub mod bridge;
pub mod decoder;
pub mod metrics;
pub mod toy;
