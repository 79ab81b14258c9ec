//! Dataset distillation by patch selection.
//!
//! A text-conditional diffusion model is used as a scorer: for every image the
//! engine measures how much the class prompt lowers the denoising loss
//! compared to the null prompt, pools that loss difference into per-window
//! scores, keeps the best window per image, clusters the kept windows on
//! diffusion features and assembles the top-ranked ones into a small synthetic
//! dataset with teacher soft labels.
//!
//! Module map:
//! - [`backend`]: noise-prediction / feature contract, the planted-signal mock
//!   world and the HTTP sidecar client.
//! - [`score`]: representativeness, zero-shot posteriors, pooling, selection.
//! - [`aggregation`]: k-means on features, intra/inter ranking, quotas.
//! - [`reconstruction`]: cropping, mosaics, manifest and image output.
//! - [`calibration`]: KL soft-label training of a desk-scale student.
//! - [`pipeline`]: configuration, ingestion and the end-to-end run.

pub mod aggregation;
pub mod backend;
pub mod calibration;
pub mod config;
pub mod dataset;
mod error;
pub mod manifest;
pub mod pipeline;
pub mod reconstruction;
pub mod score;
pub mod seed;

pub use error::{Error, Result};
