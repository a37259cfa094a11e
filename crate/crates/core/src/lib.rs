//! Scaling-law analysis for over-trained and high-density regimes.
//!
//! The crate is organised around the analysis pipeline:
//!
//! - [`runs`]: training-run records, ingestion, smoothing and fit/holdout splits.
//! - [`laws`]: closed-form evaluators (power, Chinchilla, sub-optimal with
//!   logistic repetition factors, saturating and decayed performance laws).
//! - [`fit`]: bounded Levenberg-Marquardt fitting, MAPE and law comparison.
//! - [`alloc`]: compute-optimal (N, D) allocation, OTR sweeps, exponent
//!   stability and hyperparameter frontiers.
//! - [`density`]: k-means clustering, cluster/dataset density and
//!   density-based selection over embedding sets.
//! - [`synth`]: seeded generators for curves and clustered embeddings.

// `!(x > 0.0)` is used on purpose so NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloc;
pub mod density;
pub mod fit;
pub mod laws;
pub mod rng;
pub mod runs;
pub mod synth;

mod linalg;

pub use alloc::{AllocationPlan, ExponentStabilityReport};
pub use density::{Clustering, DatasetDensityReport, EmbeddingSet};
pub use fit::{FitConfig, FitResult};
pub use laws::{LawFamily, LawParams};
pub use runs::{RunSeries, TrainingRun};
