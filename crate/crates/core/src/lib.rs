//! Novel-scene detection over image embeddings.
//!
//! Scenes are compared by angular (arccos cosine) distance, clustered with
//! average linkage, and cut at a threshold `tau`; scenes left in singleton
//! clusters form the novelty set. The [`explain`] module then describes what
//! sets a novel scene apart by captioning it alongside one sampled scene per
//! cluster and asking a language model for the difference.

pub mod cache;
pub mod embedding;
pub mod explain;
pub mod harness;
pub mod hierarchy;
pub mod novelty;
pub mod pool_io;
pub mod prompt;
pub mod providers;
pub mod seed;

pub use embedding::{cosine_distance, cosine_similarity, EmbeddingVector, SceneRecord, ScenePool};
pub use hierarchy::{
    flat_clusters, naive_upgma_oracle, pairwise_distances, upgma_linkage, ClusterAssignment,
    CondensedDistanceMatrix, Dendrogram, MergeStep,
};
pub use pool_io::{load_pool, save_pool, PoolFormat};
pub use novelty::{detect_novelty, singleton_set, NoveltyOptions, NoveltyReport};
pub use harness::{build_near_homogeneous, generate_synthetic_pool, run_trial, sweep_tau, NearHomogeneousSet, SweepResult, SyntheticSpec, TrialResult};
pub use explain::{explain_novelty, sample_representatives, CaptionRecord, ExplanationResult, Explainer, ExplainOptions, RepresentativeSample};
pub use prompt::PromptSet;
pub use providers::{ClientConfig, MockCaptioner, MockCompleter, MockEmbedder};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
