//! Attention-guided masking for self-distilled vision transformers.
//!
//! A small ViT, a tape-based autodiff engine, five token-masking strategies
//! and the teacher/student objective, plus the data, evaluation, checkpoint
//! and training-loop plumbing needed to run the method on a single CPU core.
//! Training runs in `f32`; every kernel is generic so tests can use `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod masking;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainingState};
pub use config::RunConfig;
pub use data::{AugConfig, ImageDataset};
pub use distill::{LossWeights, Objective, StepMetrics, StudentTeacherPair};
pub use error::{Error, Result};
pub use eval::{FeatureBank, FeatureSource, MaskingMode};
pub use masking::{MaskPolicy, MaskStrategy, MaskVector};
pub use rng::RngState;
pub use tensor::{Scalar, Tensor};
pub use vit::{EncoderConfig, ParamSet};
