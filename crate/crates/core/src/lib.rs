//! DeepGaitV2 and SwinGait gait recognition.
//!
//! Silhouette clips `[N, T, 1, 64, 44]` pass through a backbone
//! ([`backbone`]), temporal max pooling, horizontal part pooling and a
//! part-wise BNNeck head ([`head`]). [`data`] prepares silhouettes and
//! synthetic walkers, [`train`] and [`eval`] run training and retrieval.

pub mod backbone;
pub mod blocks;
pub mod config;
pub mod data;
pub mod diagnostics;
mod error;
pub mod eval;
pub mod head;
pub mod layers;
pub mod model;
pub mod params;
pub mod swin;
pub mod train;
pub mod window;

pub use backbone::{depth_of, Backbone, BackboneConfig, ConvKind, Family, StageShape};
pub use error::{GaitError, Result};
pub use model::{GaitModel, ModelConfig};
pub use params::{LrGroup, ParamStore, Session};

pub use gaitforge_tensor as tensor;
