//! Fisher-information-driven receding-horizon planning for a mobile agent that
//! localizes RSS sensor nodes while estimating their path-loss parameters.

pub mod cli;
pub mod config;
pub mod estimator;
pub mod fisher;
pub mod harness;
pub mod model;
pub mod planner;
pub mod seeds;
