//! The pose network and its ablation variants.

mod config;
mod net;

pub use config::{ConvSpec, NetworkConfig, PoolSpec, Preset, Variant, POOL_AFTER};
pub use net::{compose_pose, image_tensor, LossVars, Model, Outputs, Targets, REL_WIDTH};
