//! Storage control over power networks with a Lyapunov-style online
//! controller, a planner for its parameters and a simulation harness.

pub mod cli;
pub mod cost;
pub mod lp;
pub mod network;
pub mod online;
pub mod planner;
pub mod policy;
pub mod scenario;
pub mod sim;
pub mod stochastic;
pub mod storage;
