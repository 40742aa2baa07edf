//! Counting surface features on spheroid-like objects.
//!
//! A point cloud with normals is centred, unwrapped into an equirectangular
//! raster, cropped to a latitude band and fed to a small encoder-decoder that
//! predicts a Gaussian likelihood map. Thresholding and connected components
//! turn the map into a count. Density-map and non-maximum-suppression
//! baselines, a synthetic benchmark and a from-scratch autodiff engine are
//! included.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod autodiff;
pub mod config;
pub mod counting;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gnet;
pub mod projection;
pub mod scalar;
pub mod synthbench;
pub mod targetmaps;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type GNet32 = gnet::GNetModel<f32>;
pub type GNet64 = gnet::GNetModel<f64>;
pub type PointCloud32 = geometry::PointCloud<f32>;
pub type PointCloud64 = geometry::PointCloud<f64>;
pub type RasterGrid32 = projection::RasterGrid<f32>;
pub type RasterGrid64 = projection::RasterGrid<f64>;
pub type TargetMap32 = targetmaps::TargetMap<f32>;
pub type TargetMap64 = targetmaps::TargetMap<f64>;
pub type Sample32 = training::Sample<f32>;
pub type Checkpoint32 = training::Checkpoint<f32>;
