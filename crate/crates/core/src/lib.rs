//! Channel-wise perceptual loss for multivariate time-series forecasting.
//!
//! The loss compares a prediction and its target inside a learned,
//! per-channel multi-scale space: both are decomposed by a pyramid filter
//! whose kernels are trained jointly with the forecaster, and the MAE of each
//! pair of components is summed.
//!
//! Module map:
//! - [`ops`]: convolution, resampling and MAE primitives with exact adjoints.
//! - [`filter`]: the learnable pyramid decomposition and its backward pass.
//! - [`losses`]: MSE, MAE and the CP loss.
//! - [`backbone`]: a DLinear-style per-channel linear forecaster.
//! - [`data`]: CSV ingestion, normalization, windowing, synthetic data.
//! - [`train`]: Adam-based joint training and evaluation.
//! - [`experiment`]: horizon/loss/seed sweeps and scale ablations with reports.

pub mod backbone;
pub mod data;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod gradcheck;
pub mod losses;
pub mod ops;
pub mod series;
pub mod train;

pub use backbone::{BackboneConfig, ForecastModel};
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use experiment::{run_compare, run_scale_ablation, ExperimentReport};
pub use filter::{decompose, reconstruct, FilterParams, PyramidDecomposition};
pub use losses::{cp_loss, mae_loss, mse_loss, LossKind, LossOutput};
pub use series::ChannelSeries;
pub use train::{evaluate, train, TrainConfig};
