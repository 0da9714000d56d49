//! Synthetic articulated-figure corpus.

pub mod camera;
pub mod dataset;
pub mod generate;
pub mod image;
pub mod render;
pub mod skeleton;

pub use camera::{place_subject, project, CameraModel};
pub use dataset::{read_dataset, record_bytes, write_dataset, DatasetFile, Sample, HEADER_BYTES};
pub use generate::{generate, generate_sample, subject_scale, Split, SynthConfig};
pub use image::{apply_color_offset, center_crop_offset, pca_color_augment, random_crop, Image, RgbEigen};
pub use render::{limb_mask, render, RenderStyle};
pub use skeleton::{
    action_name, forward_kinematics, sample_action_pose, sample_angles, sample_pose, Action, JointAngles, Limit,
    SkeletonSpec,
};
