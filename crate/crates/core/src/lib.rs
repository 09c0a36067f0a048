//! Resilience analysis for small multilayer perceptrons through the pullback
//! metric on weight space, plus geodesic recovery from structured damage.
//!
//! The pipeline: train a network ([`training`]), assemble the metric at the
//! trained weights ([`metric`]), probe it with random and adversarial
//! perturbations ([`damage`]), follow damage paths and measure break-down
//! speed and acceleration along them ([`paths`]), and recover from node
//! deletion along low-functional-change paths ([`geodesic`]).

pub mod damage;
pub mod dataset;
pub mod error;
pub mod geodesic;
pub mod linalg;
pub mod metric;
pub mod network;
pub mod paths;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use network::{FlatWeights, NetworkSpec};
