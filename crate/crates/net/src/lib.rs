//! Query-based document layout detector with iterative refinement, a
//! small reverse-mode autodiff engine and the training loop around it.

pub mod augment;
pub mod codec;
pub mod config;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use detector::Detector;
pub use error::{NetError, Result};
pub use model::{init_model, Model, ModelOutput};
pub use tdla_core::synth::generate_corpus;
pub use train::{init_detector, lr_at, train, TrainConfig, TrainData};
