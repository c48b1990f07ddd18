//! Camera-guided cross-domain adaptation for LiDAR semantic segmentation.
//!
//! Point clouds are projected into precomputed image feature maps, the
//! sampled features supervise a small point encoder through a cosine
//! alignment loss, and source/target clouds are mixed at scene and instance
//! level during training.
#![allow(clippy::needless_range_loop)]

pub mod alignment;
pub mod dataio;
pub mod encoder;
pub mod exec;
pub mod experiment;
pub mod metrics;
pub mod mixup;
pub mod model;
pub mod neighbors;
pub mod projection;
pub mod synth;
pub mod training;

pub use exec::Exec;
pub use model::{
    CameraCalibration, CameraView, Domain, DomainSample, EmbeddingMatrix, FeatureMap, MaskMap,
    PointCloud, IGNORE,
};
