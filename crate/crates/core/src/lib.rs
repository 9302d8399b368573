//! Cascaded two-stage segmentation and classification of delayed-enhancement
//! cardiac MR volumes.
//!
//! Stage 1 segments the left ventricle (cavity and myocardium) with a 2D
//! U-Net, the prediction's bounding box is cropped as a region of interest,
//! and stage 2 segments infarction and no-reflow inside that box. A case is
//! pathological when the composed segmentation holds at least ten lesion
//! voxels.
//!
//! Everything runs on synthetic phantoms ([`phantom`]) so training,
//! inference and evaluation can be checked end to end on a laptop.

pub mod cli;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
