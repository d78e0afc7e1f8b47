//! Difficulty-aware dynamic mixture of graph experts for node
//! classification.
//!
//! Library code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that do not care.

pub mod analysis;
pub mod error;
pub mod graph;
pub mod moe;
pub mod numerics;
pub mod scalar;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix32 = numerics::Matrix<f32>;
pub type Matrix64 = numerics::Matrix<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type ModelParams32 = moe::ModelParams<f32>;
pub type ModelParams64 = moe::ModelParams<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
