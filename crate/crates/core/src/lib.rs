//! Attention memoization for a toy transformer: APMs are stored in a
//! page-aligned file-backed database, retrieved by nearest-neighbour search
//! over learned embeddings of hidden states, and reused per layer when a
//! performance model says it pays off.

mod binio;
pub mod corpus;
pub mod embedder;
pub mod engine;
pub mod error;
pub mod index;
pub mod model;
pub mod profiler;
pub mod report;
pub mod similarity;
pub mod store;
pub mod tensor;

pub use corpus::{generate, tokenize, CorpusSpec, LabelRule, TokenSequence};
pub use embedder::{Embedder, EmbedderConfig, FeatureVector};
pub use engine::{
    decide_layer, layer_lookup, mixed_attention, run_baseline, run_inference, Calibration, InferenceStats,
    LookupOutcome, MemoAssets, MemoConfig, MemoLevel,
};
pub use error::{Error, Result};
pub use index::{AnnIndex, IndexConfig, QueryResult};
pub use model::{ModelConfig, ToyTransformer};
pub use profiler::{build_assets, estimate, measure_profile, BuildConfig, LayerProfile, TimingEstimate};
pub use similarity::{similarity_score, similarity_score_multihead, SimilarityScore};
pub use store::{ApmStore, MappedBatch, StoreConfig};
pub use tensor::{attention_full, attention_memoized, Apm, ApmRef, LayerWeights, Matrix};
