//! Prune large embedding-indexed datasets down to a high-value subset.
//!
//! The toolkit runs up to three stages over a dataset of unit-normalized
//! embeddings (plus optional per-example match scores):
//!
//! 1. semantic deduplication within embedding-space clusters,
//! 2. match-score filtering (absolute threshold or top fraction),
//! 3. density-based pruning: cluster the survivors, score each cluster's
//!    complexity from its intra- and inter-cluster cosine distances, turn
//!    complexities into a sampling distribution, solve an exact quadratic
//!    program for per-cluster keep counts, and keep the least prototypical
//!    members of each cluster.
//!
//! Every stage consumes and produces a [`mask::SelectionMask`] over the
//! original dataset, so stage outputs compose directly.

pub mod dbp;
pub mod dedup;
pub mod embed;
pub mod error;
pub mod kmeans;
pub mod mask;
pub mod pipeline;
pub mod qp;
pub mod score;
pub mod synth;
mod vecmath;

pub use embed::{EmbeddingMatrix, ScoreArray};
pub use error::{Error, Result};
pub use mask::SelectionMask;
