//! Manifests, pair filtering, batching and the synthetic shapes dataset.

pub mod batch;
pub mod filter;
pub mod image;
pub mod pair;
pub mod synthetic;

pub use batch::{make_batches, Batch, Batcher};
pub use filter::{filter_top_p, keep_count, replay_filters, score_pairs, FilterMode, ScoreReport};
pub use image::ImageTensor;
pub use pair::{ImageRef, ImageTextPair, Manifest};
pub use synthetic::{describe_shape_image, generate_synthetic_dataset, ShapeSpec};
