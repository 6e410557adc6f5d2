//! Simulation, device daemon, trial orchestration, dataset recording and trace
//! analysis for automated door and drawer manipulation testbeds.

pub mod analysis;
pub mod daemon;
pub mod dataset;
pub mod gateway;
pub mod model;
pub mod orchestrator;
pub mod protocol;
pub mod sim;
