pub mod config;
pub mod layers;
pub mod multimodal;
pub mod params;
pub mod sequence;
pub mod text;
pub mod vicha;
pub mod vision;

pub use config::{last_layers_pairing, ModelConfig};
pub use layers::{AttentionCapture, Linear};
pub use multimodal::{replicate_multimodal_for_pair, MultimodalDecoder, PairedDecoder};
pub use params::{momentum_update, MomentumPair, ParamStore, Scope};
pub use sequence::{LayeredBatch, TokenKind, TokenSequence};
pub use text::TextEncoder;
pub use vicha::{Encoders, VichaModel};
pub use vision::{patchify, ConceptTokens, VisionEncoder};
