//! Sub-cortical brain structure segmentation.
//!
//! End-to-end pipeline: NIfTI-1 volume I/O, a 2.5D patch CNN with atlas
//! spatial priors trained with boundary-restricted balanced sampling, ROI
//! restricted inference with largest-component post-processing, and
//! DSC / Hausdorff / Wilcoxon evaluation. A synthetic phantom generator
//! makes the whole pipeline runnable and testable without clinical data.

pub mod inference;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod phantom;
pub mod sampling;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use volume::{AtlasVolume, LabelVolume, ScalarVolume, VolumeHeader};
