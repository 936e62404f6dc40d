//! Simulation and learning engine for hierarchical leader/follower
//! self-optimization of multi-actuator production plants: state-based
//! potential games among each role group coupled through a Stackelberg
//! game between the two coalitions.

pub mod game;
pub mod learning;
pub mod maps;
pub mod plant;
