pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod params;
pub mod pipeline;
pub mod training;
pub mod types;

pub use config::{TrainConfig, UpsampleMode, Variant};
pub use error::{Error, Result};
pub use nn::ModelBundle;
pub use noise::{NoiseKind, NoiseSpec};
pub use types::{ImageArray, ImageRole, LatentFeature, WatermarkMessage};
