//! Self-supervised 3D keypoint estimation from point clouds.
//!
//! The crate holds the full numerical stack: geometric primitives and rigid
//! alignment, the training losses, a small reverse-mode autodiff engine, the
//! point-cloud-to-keypoints network, the Adam optimizer, evaluation metrics,
//! and a synthetic labeled shape generator. Everything here is pure
//! computation on explicit inputs; file formats, the training loop driver,
//! and the CLI live in the companion `pointkey-cli` crate.
//!
//! The crate is `no_std`-compatible (`alloc` required): disable default
//! features and enable `libm` to route float math through `libm`.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("pointkey-core requires either the `std` or the `libm` feature");

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod geometry;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod svd3;
pub mod synth;
pub mod train;

pub use geometry::{KeypointSet, PointCloud, Rotation3};
pub use loss::{LossConfig, PairSample};
pub use metrics::MetricConfig;
pub use model::{NetworkConfig, NetworkParams};
pub use rng::SeedStream;
pub use train::TrainConfig;
