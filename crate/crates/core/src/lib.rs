//! Riccati observers for position and velocity-bias estimation from
//! direction and range measurements.
//!
//! The estimation problems are written as linear time-varying systems in a
//! lifted state (see [`observers::ObserverVariant::model`]) and observed with
//! `K = k P Cᵀ Q`, `P` following the continuous Riccati equation.

pub mod config;
pub mod error;
pub mod ltv;
pub mod numerics;
pub mod observers;
pub mod report;
pub mod riccati;
pub mod sim;

pub use error::{Error, Result};
pub use numerics::SymMatrix;
