//! MambaCapsule: ECG beat classification with a selective state-space
//! feature network, a dynamically routed capsule head and a capsule-driven
//! reconstructor for explanations.
//!
//! Everything runs on the small reverse-mode autodiff engine in
//! [`autodiff`], in 64-bit floats.

pub mod autodiff;
pub mod capsule;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use capsule::CapsuleOutput;
pub use config::ModelConfig;
pub use data::{BeatRecord, DatasetSplit, LabelVocabulary};
pub use error::{Error, Result};
pub use metrics::{ClassReport, ConfusionMatrix};
pub use model::MambaCapsule;
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;
pub use training::{LossConfig, ScheduleConfig, TrainConfig};
