//! Factorization machines whose feature embeddings come from graph
//! convolution over a feature co-occurrence graph.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`data`]: libFM parsing, field maps, splits and negative sampling;
//! * [`graph`]: co-occurrence graph construction, normalization and
//!   neighbor sampling;
//! * [`model`]: FM / GEM scoring and model checkpoints;
//! * [`train`]: loss, analytic gradients, dropout, optimizers and the
//!   early-stopping loop;
//! * [`eval`]: RMSE / MAE and parameter counts.
//!
//! All randomness is seeded; see [`seed`] for how one run seed fans out.

pub mod data;
pub mod eval;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod seed;
pub mod train;

pub use data::{FeatureSpace, SparseInstance};
pub use eval::MetricReport;
pub use graph::{FeatureGraph, GraphMode, NormalizedAdjacency};
pub use model::{Activation, ModelParams};
pub use train::{RunReport, TrainConfig};
