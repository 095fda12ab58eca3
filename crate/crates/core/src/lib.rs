//! Stiffness-budgeted Lipschitz constraints for RL policies on a planar arm.

pub mod config;
pub mod linalg;
pub mod metrics;
pub mod policy;
pub mod regularizers;
pub mod sim;
pub mod stiffness;
pub mod trainer;
