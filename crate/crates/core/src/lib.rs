//! Unlearning-based training data attribution for a toy latent diffusion
//! transformer.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! experiment driver and the CLI use.

pub mod analysis;
pub mod attribution;
mod binio;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fim;
pub mod model;
pub mod reduce;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod unlearn;

pub use error::{Result, TdaError};
pub use scalar::Scalar;

pub use analysis::{Extreme, ReportRow};
pub use attribution::{AttributionResult, EvalSpec, LossCache};
pub use data::{DatasetSpec, KMeans, LenDistribution};
pub use experiment::{ExperimentConfig, Overrides};
pub use model::{LayerGroup, ModelConfig, TrainConfig};
pub use unlearn::{MaskPolicy, UnlearnConfig, UnlearnProvenance};

pub type Matrix = tensor::Matrix<f64>;
pub type LatentTrack = data::LatentTrack<f64>;
pub type Dataset = data::Dataset<f64>;
pub type EmbeddingSet = data::EmbeddingSet<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type Checkpoint = model::Checkpoint<f64>;
pub type Draw = model::Draw<f64>;
pub type FimDiagonal = fim::FimDiagonal<f64>;
pub type ScoreReport = analysis::ScoreReport;
