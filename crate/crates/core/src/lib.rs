//! Monocular depth estimation with a convolutional (local) branch and an
//! attention (global) branch whose predictions are blended per pixel by
//! confidences derived from learned aleatoric uncertainty.
//!
//! The crate covers the whole pipeline: dataset loading and augmentation,
//! both network branches, the uncertainty-based fusion, the training
//! objectives, median-scaled depth metrics, sparsification curves and
//! point-cloud export.

pub mod datasets;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod global_branch;
pub mod local_branch;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod trainer;
pub mod uncertainty_eval;

pub use datasets::{AugmentationConfig, DatasetLayout, DatasetMeta, DepthMap, RgbImage, Sample};
pub use error::{Error, Result};
pub use fusion::{DepthModel, FusionMode, ModelConfig, ModelOutput};
pub use geometry::{CameraIntrinsics, PointCloud};
pub use global_branch::GlobalBranchConfig;
pub use local_branch::BranchConfig;
pub use losses::LossWeights;
pub use metrics::MetricReport;
pub use nn::Phase;
pub use trainer::{Checkpoint, TrainConfig};
pub use uncertainty_eval::SparsificationCurve;
