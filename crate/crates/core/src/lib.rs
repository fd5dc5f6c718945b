//! Dense bidirectional correspondence by sampling-grid prediction.

pub mod error;
pub mod features;
pub mod gradcheck;
pub mod imagery;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod predictor;
pub mod solver;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, ErrorClass, Result};
pub use imagery::{
    identity_grid, load_grid, load_image, save_grid, ConfidenceMap, ErrorMap, ImageBuffer, Keypoint, KeypointSet, Mask,
    Prediction, SamplingGrid,
};
