//! Body-torque disturbance observer. The estimate is cancelled on top of
//! the NMPC command so the plant behaves like the prediction model.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::integrate::plant_derivative;
use crate::dynamics::{allocate_with, ground_inertia, solve_allocation_with, DynamicsError, Immersion, ThrustCoefficients, Wrench};
use crate::model::{HybridState, Medium, MotionMode, RotorCommand, VehicleParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverConfig {
    /// Time constant of the estimate filter, s.
    pub tau: f64,
    /// Bound on each estimated torque component, N m.
    pub limit: f64,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self { tau: 0.02, limit: 0.2 }
    }
}

fn body_rate(s: &HybridState) -> Vector3<f64> {
    if s.mode.is_ground() {
        s.w_t
    } else {
        s.w_a
    }
}

fn inertia(s: &HybridState, p: &VehicleParams, imm: Immersion) -> Vector3<f64> {
    if s.mode.is_ground() {
        ground_inertia(p, s.mode.medium().zeta())
    } else {
        p.inertia_a + p.added_inertia * imm.body
    }
}

#[derive(Debug, Clone)]
pub struct TorqueObserver {
    pub cfg: ObserverConfig,
    estimate: Vector3<f64>,
    /// Previous state, applied rotor thrusts and immersion.
    last: Option<(HybridState, RotorCommand, Immersion)>,
}

impl TorqueObserver {
    pub fn new(cfg: ObserverConfig) -> Self {
        Self {
            cfg,
            estimate: Vector3::zeros(),
            last: None,
        }
    }

    pub fn estimate(&self) -> Vector3<f64> {
        self.estimate
    }

    /// Feed the current state and the rotor thrusts acting now. The
    /// estimate restarts whenever the contact mode changes.
    pub fn update(
        &mut self,
        state: &HybridState,
        thrust: &RotorCommand,
        imm: Immersion,
        params: &VehicleParams,
        dt: f64,
    ) -> Result<Vector3<f64>, DynamicsError> {
        if let Some((prev, u, pimm)) = self.last.take() {
            if prev.mode.is_ground() == state.mode.is_ground() {
                let d = plant_derivative(&prev, &u, params, pimm, &Vector3::zeros())?;
                let base = if prev.mode.is_ground() { 14 } else { 11 };
                let nominal = Vector3::new(d[base], d[base + 1], d[base + 2]);
                let measured = (body_rate(state) - body_rate(&prev)) / dt;
                let mut r = (measured - nominal).component_mul(&inertia(&prev, params, pimm));
                if state.mode.is_ground() {
                    // Roll is fixed by the wheels.
                    r.x = 0.0;
                }
                let a = dt / (self.cfg.tau + dt);
                self.estimate += (r - self.estimate) * a;
                self.estimate = self.estimate.map(|v| v.clamp(-self.cfg.limit, self.cfg.limit));
            } else {
                self.estimate = Vector3::zeros();
            }
        }
        self.last = Some((*state, *thrust, imm));
        Ok(self.estimate)
    }
}

/// `u` with an extra body torque `-estimate` realized in the frame the
/// plant's mode uses, clamped to `[lo, hi]`.
pub fn compensate(
    u: &RotorCommand,
    estimate: &Vector3<f64>,
    mode: MotionMode,
    medium: Medium,
    params: &VehicleParams,
    (lo, hi): (f64, f64),
) -> Result<RotorCommand, DynamicsError> {
    let coeffs = ThrustCoefficients::for_medium(params, medium);
    let frame = if mode.is_ground() { crate::dynamics::Frame::T } else { crate::dynamics::Frame::A };
    let w = allocate_with(u, params, &coeffs, frame);
    let target = Wrench::new(w.thrust, w.torque - estimate, frame);
    Ok(solve_allocation_with(&target, params, &coeffs)?.clamp(lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::integrate::integrate_step;

    #[test]
    fn recovers_a_constant_pitch_torque_on_the_ground() {
        let p = VehicleParams::default();
        let imm = Immersion::of(Medium::Air);
        let mut s = HybridState::ground(0.0, 0.0, 0.0, 0.0, &p);
        let u = RotorCommand::splat(0.5);
        let d = Vector3::new(0.0, 0.05, 0.0);
        let mut obs = TorqueObserver::new(ObserverConfig::default());
        let dt = 0.005;
        for _ in 0..60 {
            obs.update(&s, &u, imm, &p, dt).unwrap();
            for _ in 0..5 {
                s = integrate_step(&s, &u, &p, imm, &d, 0.001).unwrap();
            }
        }
        let e = obs.update(&s, &u, imm, &p, dt).unwrap();
        assert!((e.y - 0.05).abs() < 2e-3, "{e:?}");
        assert_eq!(e.x, 0.0);
    }

    #[test]
    fn compensation_adds_only_torque() {
        let p = VehicleParams::default();
        let u = RotorCommand([3.0, 2.0, 3.0, 2.0]);
        let est = Vector3::new(0.01, -0.02, 0.003);
        let c = compensate(&u, &est, MotionMode::FlightAir, Medium::Air, &p, (-10.0, 10.0)).unwrap();
        let coeffs = ThrustCoefficients::for_medium(&p, Medium::Air);
        let w0 = allocate_with(&u, &p, &coeffs, crate::dynamics::Frame::A);
        let w1 = allocate_with(&c, &p, &coeffs, crate::dynamics::Frame::A);
        assert!((w1.thrust - w0.thrust).abs() < 1e-9);
        assert!((w1.torque - (w0.torque - est)).norm() < 1e-9);
    }
}
