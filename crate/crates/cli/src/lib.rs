//! IO, file formats, the training driver, and evaluation pipelines around
//! `pointkey-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalrun;
pub mod formats;
pub mod manifest;
pub mod perturbrun;
pub mod synthgen;
pub mod trainer;
