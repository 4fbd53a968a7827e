//! Simulation and control stack for a triphibious eccentric-CoG quadrotor.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod flatness;
pub mod hnmpc;
pub mod model;
pub mod pid;
pub mod propulsion;
pub mod reference;
pub mod sim;
pub mod supervisor;

pub use dynamics::{DynamicsError, Frame, Immersion, ThrustCoefficients, Wrench};
pub use model::{HybridState, Medium, ModelError, MotionMode, RotorCommand, VehicleParams};
