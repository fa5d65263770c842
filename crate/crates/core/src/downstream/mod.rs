//! Evaluation protocols and task heads.

pub mod grounding;
pub mod heads;
pub mod retrieval;

pub use grounding::{
    grad_cam_grounding, rank_proposals, relevance_from_capture, GridBox, GroundingMap, RankedBox,
};
pub use heads::{
    encode_paired, paired_image_forward, text_assignment_pretask, EntailmentHead, PairedHeads,
    PairedInputs,
};
pub use retrieval::{retrieval_eval, two_stage_rankings, RetrievalResult, RECALL_KS};
