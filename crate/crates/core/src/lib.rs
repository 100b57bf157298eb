//! Semantic RGB-D SLAM on differentiable isotropic Gaussian splats.

pub mod config;
pub mod error;
pub mod graph;
pub mod image;
pub mod mapper;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod tracker;

pub use error::{Error, Result};
pub use image::{Image, LabelImage};
pub use scene::{CameraIntrinsics, Gaussian, GaussianMap, Observation, Pose};
pub mod dataset;
pub mod mask;
