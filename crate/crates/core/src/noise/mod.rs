//! The noise layer: every distortion placed between embedding and
//! extraction, plus the reference JPEG codec.

mod apply;
pub mod jpeg;
mod median;
mod spec;

pub use apply::{apply_noise, distort_batch, distort_one, cropout_mask, DistortionContext};
pub use median::median_filter;
pub use spec::{sample_training_spec, Distortion, NoiseKind, NoiseSpec, ParamValue};
