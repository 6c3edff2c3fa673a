//! Rasterized mesh features, learned inverse-depth error prediction and
//! depth-image correction.
//!
//! Data flow:
//!
//! 1. [`scene`] loads meshes, intrinsics and trajectories.
//! 2. [`raster`] renders a mesh into a [`raster::FeatureImageSet`].
//! 3. [`groundtruth`] differences camera and reference renders into a signed
//!    inverse-depth error image.
//! 4. [`network`] (built on [`autodiff`]) predicts that error from features;
//!    [`train`] fits it with the BerHu loss from [`metrics`].
//! 5. [`correction`] subtracts the prediction from the inverse depth and
//!    reports RMSE / threshold accuracy, including feature ablations.
//!
//! [`synthetic`] produces paired reference / corrupted scenes so the whole
//! pipeline runs without external data.

pub mod autodiff;
pub mod config;
pub mod correction;
pub mod dataset;
pub mod error;
pub mod groundtruth;
pub mod image;
pub mod metrics;
pub mod network;
pub mod raster;
pub mod scene;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
