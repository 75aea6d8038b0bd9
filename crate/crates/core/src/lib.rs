//! Approximate caching of intermediate denoising states for text-to-image
//! serving, with a closed-form synthetic backend for exact evaluation.
//!
//! A request is embedded, optionally gated by a membership predictor,
//! matched against an exact cosine index, and, when a cached prompt is
//! similar enough, resumed from that prompt's state at the deepest safe
//! step instead of generated from scratch.

pub mod backend;
pub mod config;
pub mod domain;
pub mod error;
pub mod index;
pub mod pipeline;
pub mod policy;
pub mod predictor;
pub mod report;
pub mod selector;
pub mod store;
pub mod workload;

pub use backend::{BackendConfig, DiffusionBackend, GenerationResult, SyntheticBackend, UNREACHABLE};
pub use config::{run_experiment, ExperimentConfig};
pub use domain::{cosine_similarity, normalize, Embedding, LatentState, PromptRecord, SimilarityScore, StepSet};
pub use error::{Error, Result};
pub use pipeline::{Pipeline, PipelineConfig, RequestOutcome};
pub use policy::PolicyKind;
pub use report::{RequestPath, RunReport};
pub use selector::SimKMap;
