//! Caption-derived concept corpora, embedding providers and per-image
//! concept selection.

pub mod cache;
pub mod corpus;
pub mod provider;
pub mod select;

pub use cache::{embed_corpus, read_concept_file, write_concept_file, CacheRecord};
pub use corpus::{build_corpus, ConceptCorpus, ConceptExtractor, PhraseExtractor};
pub use provider::{
    CacheProvider, EmbeddingProvider, MockProvider, RemoteProvider, ShapesProvider,
};
pub use select::{
    select_top_k, vca_sample, vca_subset_size, VisualConceptSet, DEFAULT_K, DEFAULT_P_VC,
};
