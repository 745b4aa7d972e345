//! Thermal-aware throughput control for coupled multi-cell networks.

pub mod baselines;
pub mod config;
pub mod environment;
pub mod experiment;
pub mod load;
pub mod neural;
pub mod rng;
pub mod sac;
pub mod thermal;
pub mod topology;
