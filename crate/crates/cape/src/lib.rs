//! Closed-loop LLM task planning with precondition-error recovery.
//!
//! The crate bundles a deterministic household-world simulator, embedding
//! and completion backends, skill grounding, three planning regimes
//! (open-loop, re-sampling, corrective re-prompting), a SayCan baseline,
//! the evaluation-metric suite, and the experiment harness behind the
//! `cape` binary.

pub mod completion;
pub mod embedding;
pub mod grounding;
pub mod harness;
pub mod metrics;
pub mod num;
pub mod planner;
pub mod saycan;
pub mod world;

/// Concrete scalar used throughout the pipeline; the numeric kernels are
/// generic over [`num::Real`].
pub type Score = f64;

/// Embedding vector at the pipeline's concrete scalar.
pub type Vector = embedding::EmbeddingVector<Score>;
