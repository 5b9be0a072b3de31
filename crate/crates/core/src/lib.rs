//! Simulation and spectral analysis of quantized thermostatically controlled
//! load ensembles under mean-field feedback.

pub mod cli;
pub mod dynamics;
pub mod kernel;
pub mod montecarlo;
pub mod reduced;
pub mod spectral;
pub mod state_space;
