//! Tube-enhanced multi-stage nonlinear model predictive control.

pub mod ad;
pub mod calibration;
pub mod closed_loop;
pub mod config;
pub mod controllers;
pub mod error;
pub mod estimator;
pub mod io;
pub mod model;
pub mod nlp;
pub mod scenario_tree;

pub use error::{Error, Result};
