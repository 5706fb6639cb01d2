//! LiDAR loop-closure detection and point-cloud registration.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which the detection pipeline and evaluation use.

// Negated comparisons are used on purpose so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod features;
pub mod geom;
pub mod ingest;
pub mod pipeline;
pub mod registration;
pub mod sampling;
pub mod scalar;
pub mod spatial;
pub mod transport;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Point64 = geom::Point<f64>;
pub type PointCloud64 = geom::PointCloud<f64>;
pub type Pose64 = geom::Pose<f64>;
pub type KeypointSet64 = sampling::KeypointSet<f64>;
pub type KeypointFeatures64 = features::KeypointFeatures<f64>;
pub type TransportPlan64 = transport::TransportPlan<f64>;
pub type UotParams64 = transport::UotParams<f64>;
pub type VladParams64 = descriptor::VladParams<f64>;
pub type GlobalDescriptor64 = descriptor::GlobalDescriptor<f64>;
pub type RegistrationResult64 = registration::RegistrationResult<f64>;
