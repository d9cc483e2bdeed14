//! Two-stage MRI lesion analysis: segment candidate regions in slice stacks,
//! then classify each patient from the cropped regions.

pub mod dataio;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
