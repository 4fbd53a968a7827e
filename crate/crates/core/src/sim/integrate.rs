//! RK4 stepping of the hybrid plant and the physical contact events
//! (liftoff, touchdown, water surface).

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{flight_derivative_immersed, ground_derivative, ground_inertia, DynamicsError, Immersion};
use crate::model::{HybridState, Medium, MotionMode, RotorCommand, StateVector, VehicleParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

pub use crate::model::MAX_GROUND_PITCH;

/// Support surface and water body. With `water_level` set, the support
/// surface is a seabed under water.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct World {
    pub ground_height: f64,
    pub water_level: Option<f64>,
    /// Vertical extent of the hull used for partial immersion at the
    /// surface, m.
    pub hull_height: f64,
}

impl Default for World {
    fn default() -> Self {
        Self {
            ground_height: 0.0,
            water_level: None,
            hull_height: 0.08,
        }
    }
}

impl World {
    /// Submerged fraction of the hull at height `z`.
    pub fn immersion(&self, z: f64) -> f64 {
        match self.water_level {
            None => 0.0,
            Some(w) => ((w - (z - 0.5 * self.hull_height)) / self.hull_height).clamp(0.0, 1.0),
        }
    }

    pub fn support_medium(&self) -> Medium {
        if self.water_level.is_some() {
            Medium::Water
        } else {
            Medium::Air
        }
    }

    pub fn ground_mode(&self) -> MotionMode {
        match self.support_medium() {
            Medium::Air => MotionMode::GroundLand,
            Medium::Water => MotionMode::GroundSeabed,
        }
    }

    /// Flight mode label for an immersion fraction.
    pub fn flight_mode(&self, fraction: f64) -> MotionMode {
        if fraction <= 0.0 {
            MotionMode::FlightAir
        } else if fraction >= 1.0 {
            MotionMode::FlightWater
        } else {
            MotionMode::WaterSurface
        }
    }
}

/// Plant derivative with an external body torque (mass frame in flight,
/// geometric frame on the ground).
pub fn plant_derivative(
    state: &HybridState,
    u: &RotorCommand,
    params: &VehicleParams,
    immersion: Immersion,
    torque: &Vector3<f64>,
) -> Result<StateVector, DynamicsError> {
    if state.mode.is_ground() {
        let medium = state.mode.medium();
        let mut d = ground_derivative(state, u, params, medium)?;
        let inertia = ground_inertia(params, medium.zeta());
        for i in 0..3 {
            d[14 + i] += torque[i] / inertia[i];
        }
        Ok(d)
    } else {
        let mut d = flight_derivative_immersed(state, u, params, immersion)?;
        let inertia = params.inertia_a + params.added_inertia * immersion.body;
        for i in 0..3 {
            d[11 + i] += torque[i] / inertia[i];
        }
        Ok(d)
    }
}

/// One classical RK4 step with the inputs held. Ground states are
/// re-projected afterwards: height fixed, roll rate set by the wheels.
pub fn integrate_step(
    state: &HybridState,
    u: &RotorCommand,
    params: &VehicleParams,
    immersion: Immersion,
    torque: &Vector3<f64>,
    dt: f64,
) -> Result<HybridState, DynamicsError> {
    let mode = state.mode;
    let x0 = state.to_vector();
    let f = |x: &StateVector| plant_derivative(&HybridState::from_vector(x, mode), u, params, immersion, torque);
    let k1 = f(&x0)?;
    let k2 = f(&(x0 + k1 * (0.5 * dt)))?;
    let k3 = f(&(x0 + k2 * (0.5 * dt)))?;
    let k4 = f(&(x0 + k3 * dt))?;
    let x1 = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let mut next = HybridState::from_vector(&x1, mode);
    if mode.is_ground() {
        next.p_w.z = state.p_w.z;
        next.w_t.x = -next.theta_t.tan() * next.w_t.z;
        next.sync_from_ground();
    } else {
        next.sync_from_flight();
    }
    Ok(next)
}

/// Net upward force on a grounded vehicle other than the support reaction.
fn lift_margin(state: &HybridState, u: &RotorCommand, params: &VehicleParams) -> f64 {
    let zeta = state.mode.medium().zeta();
    let thrust = crate::dynamics::allocate_terrestrial(u, params, state.mode.medium()).thrust;
    thrust * (-state.theta_t.sin()) + params.buoyancy() * zeta - params.weight()
}

/// Switch between the ground and flight models when contact is made or
/// lost, and relabel the flight mode by immersion. Returns the new state.
pub fn resolve_contact(state: &HybridState, u: &RotorCommand, params: &VehicleParams, world: &World) -> HybridState {
    let mut s = *state;
    let floor = world.ground_height + params.contact_height;
    if s.mode.is_ground() {
        if lift_margin(&s, u, params) > 0.0 {
            s.mode = world.flight_mode(world.immersion(s.p_w.z));
            s.sync_from_ground();
        }
        return s;
    }
    let v_w = s.velocity_w();
    if s.p_w.z <= floor && v_w.z <= 0.0 {
        s.sync_from_flight();
        s.mode = world.ground_mode();
        s.p_w.z = floor;
        s.theta_t = s.theta_t.clamp(-MAX_GROUND_PITCH, MAX_GROUND_PITCH);
        s.w_t.x = -s.theta_t.tan() * s.w_t.z;
        s.sync_from_ground();
        return s;
    }
    s.mode = world.flight_mode(world.immersion(s.p_w.z));
    s
}
