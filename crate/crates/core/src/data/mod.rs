//! Keypoint files, cleaning, clip segmentation, augmentation, splits and a
//! synthetic recording generator.

mod clips;
mod clipset;
mod keypoints;
mod synth;

pub use clips::*;
pub use clipset::ClipSet;
pub use keypoints::*;
pub use synth::*;
