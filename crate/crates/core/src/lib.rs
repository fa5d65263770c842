//! Vision-language pretraining at desk scale: visual concepts injected into
//! the image encoder, hierarchical image-text contrastive alignment, masked
//! language and image modelling, CLIP-style pair filtering and retrieval /
//! grounding evaluation.

pub mod artifact;
pub mod concepts;
pub mod data;
pub mod downstream;
pub mod error;
pub mod model;
pub mod objectives;
pub mod ops;
pub mod pipeline;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
