//! Cross-view contrastive masked autoencoders over paired ground-level and
//! satellite imagery, with metadata fusion, downstream classification,
//! retrieval and species-distribution mapping.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for common uses.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod geo;
pub mod metadata;
pub mod models;
pub mod objectives;
pub mod params;
pub mod pixels;
pub mod retrieval;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod util;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type Image64 = pixels::Image<f64>;
pub type Image32 = pixels::Image<f32>;
pub type Model64 = models::CrossViewModel<f64>;
pub type Model32 = models::CrossViewModel<f32>;
