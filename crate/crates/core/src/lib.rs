//! Dual-branch reverse distillation for paired RGB + depth anomaly
//! detection.
//!
//! A frozen teacher encodes each modality once. Each branch reconstructs
//! its own modality's teacher features through a student decoder, helped by
//! a crossmodal filter (the other modality, squeezed through a spatial
//! bottleneck, joins the decoder input) and a crossmodal amplifier (the
//! other modality, mapped through an inverted channel bottleneck, is blended
//! into the decoder output). Per-branch cosine-distance maps are smoothed,
//! z-normalized with validation statistics and summed.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix `f32`.

pub mod amplifier;
pub mod autograd;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod filter;
pub mod heatmap;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod networks;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod scalar;
pub mod scoring;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::{Result, TrdError};
pub use model::{Modality, ModelConfig, TrdModel};
pub use networks::{BackboneProfile, FeaturePyramid, ImageTensor};
pub use scalar::Scalar;
pub use scoring::{AnomalyMap, CalibrationStats, FusionStrategy, ScoreConfig};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainLog, Trainer};

pub type Model = TrdModel<f32>;
pub type Sample = datasets::MultimodalSample<f32>;
pub type Pyramid = FeaturePyramid<f32>;
pub type Image = ImageTensor<f32>;
pub type ModelTrainer = Trainer<f32>;
