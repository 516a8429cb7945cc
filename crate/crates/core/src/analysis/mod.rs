//! Diagnostics and experiment harnesses.

pub mod metrics;
pub mod prune;
pub mod report;
pub mod sweep;

pub use metrics::{adaptation, aggregate_forgetting, forgetting, mean_std, prompt_similarity, spearman, AccuracyMatrix};
pub use prune::{prune_pool, PruneResult};
pub use report::{summarize, Summary};
pub use sweep::{select_lambda, sweep, LambdaSelection, SweepPoint, SweepResult};
