//! Day-by-day computation of the least restrictive non-pharmaceutical
//! intervention level that keeps hospitalizations under a risk-tolerance
//! limit, for single-region and mobility-coupled SEIHRVS models.

pub mod calibration;
pub mod controller;
pub mod epimodel;
pub mod error;
pub mod ode;
pub mod params;
pub mod scenarios;
pub mod surrogates;

pub use epimodel::{
    derivative_network, derivative_single, integrate, integrate_single, MobilityMatrix, NetworkModel, Region,
    Simulator, Trajectory,
};
pub use error::{Error, Result};
pub use params::{EpiState, ModelParams, ParamFile, UptakeMode};
