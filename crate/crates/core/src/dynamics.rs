//! Hybrid continuous-time dynamics: flight mode (air or water) about the
//! CoG in the mass frame, ground mode (land or seabed) about the geometric
//! center, hydrodynamic loads and the two thrust/torque allocation maps.

use nalgebra::{Matrix4, Vector3, Vector4};
use thiserror::Error;

use crate::model::{
    euler_rate_matrix, frame_t_from_a, rotation_a_to_w, rotation_t_to_w, HybridState, Medium,
    ModelError, RotorCommand, StateVector, VehicleParams,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("ground pitch {0} rad is at the sec(theta) singularity")]
    GroundSingularity(f64),
    #[error("thrust-sign fixed point did not converge after {0} iterations")]
    AllocationNonConvergence(usize),
    #[error("rotor command {command:?} outside [{lo}, {hi}]")]
    OutOfBounds {
        command: RotorCommand,
        lo: f64,
        hi: f64,
    },
    #[error("state is in mode {0:?}, not valid for this derivative")]
    WrongMode(crate::model::MotionMode),
}

/// Which body frame a wrench is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Mass frame, flight allocation.
    A,
    /// Geometric-center frame, ground allocation.
    T,
}

/// Collective thrust and body torque.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub thrust: f64,
    pub torque: Vector3<f64>,
    pub frame: Frame,
}

impl Wrench {
    pub fn new(thrust: f64, torque: Vector3<f64>, frame: Frame) -> Self {
        Self { thrust, torque, frame }
    }

    fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.thrust, self.torque.x, self.torque.y, self.torque.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HydroForces {
    /// Drag force in the mass frame (to be subtracted).
    pub f_drag: Vector3<f64>,
    /// Drag moment in the mass frame (to be subtracted).
    pub tau_drag: Vector3<f64>,
    /// Buoyancy force in the world frame.
    pub f_b: Vector3<f64>,
    /// Buoyancy moment about the CoG, mass frame.
    pub tau_buo: Vector3<f64>,
}

/// Forward/reverse thrust coefficients currently seen by the rotors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThrustCoefficients {
    pub fwd: f64,
    pub rev: f64,
}

impl ThrustCoefficients {
    pub fn for_medium(params: &VehicleParams, medium: Medium) -> Self {
        match medium {
            Medium::Air => Self {
                fwd: params.c_t_air_fwd,
                rev: params.c_t_air_rev,
            },
            Medium::Water => Self {
                fwd: params.c_t_water_fwd,
                rev: params.c_t_water_rev,
            },
        }
    }

    /// Linear blend for rotors partially submerged (`fraction` in water).
    pub fn blended(params: &VehicleParams, fraction: f64) -> Self {
        let s = fraction.clamp(0.0, 1.0);
        Self {
            fwd: s * params.c_t_water_fwd + (1.0 - s) * params.c_t_air_fwd,
            rev: s * params.c_t_water_rev + (1.0 - s) * params.c_t_air_rev,
        }
    }

    pub fn select(&self, thrust: f64) -> f64 {
        if thrust >= 0.0 {
            self.fwd
        } else {
            self.rev
        }
    }
}

/// How much of the vehicle is in water. `body` scales added mass, drag and
/// buoyancy; `rotors` blends the thrust coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Immersion {
    pub body: f64,
    pub rotors: f64,
}

impl Immersion {
    pub fn of(medium: Medium) -> Self {
        let z = medium.zeta();
        Self { body: z, rotors: z }
    }
}

const YAW_SIGN: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];

/// Allocation matrix for a fixed per-rotor coefficient choice.
fn allocation_matrix(params: &VehicleParams, ct: &[f64; 4], frame: Frame) -> Matrix4<f64> {
    let a = params.arm();
    let d = match frame {
        Frame::A => params.delta,
        Frame::T => 0.0,
    };
    let mut b = Matrix4::zeros();
    for j in 0..4 {
        b[(0, j)] = 1.0;
        b[(3, j)] = YAW_SIGN[j] * params.c_m / ct[j];
    }
    let roll = [-a, a, a, -a];
    let pitch_a = [d - a, d + a, d - a, d + a];
    for j in 0..4 {
        b[(1, j)] = roll[j];
        b[(2, j)] = pitch_a[j];
    }
    b
}

fn coefficient_choice(u: &RotorCommand, coeffs: &ThrustCoefficients) -> [f64; 4] {
    u.0.map(|t| coeffs.select(t))
}

pub fn allocate_with(
    u: &RotorCommand,
    params: &VehicleParams,
    coeffs: &ThrustCoefficients,
    frame: Frame,
) -> Wrench {
    let b = allocation_matrix(params, &coefficient_choice(u, coeffs), frame);
    let w = b * Vector4::from(u.0);
    Wrench::new(w[0], Vector3::new(w[1], w[2], w[3]), frame)
}

/// Thrust and mass-frame torque from rotor thrusts, including the CoG
/// offset terms.
pub fn allocate_aerial(u: &RotorCommand, params: &VehicleParams, medium: Medium) -> Wrench {
    allocate_with(u, params, &ThrustCoefficients::for_medium(params, medium), Frame::A)
}

/// Thrust and geometric-frame torque from rotor thrusts.
pub fn allocate_terrestrial(u: &RotorCommand, params: &VehicleParams, medium: Medium) -> Wrench {
    allocate_with(u, params, &ThrustCoefficients::for_medium(params, medium), Frame::T)
}

const MAX_SIGN_ITERS: usize = 8;

/// Solve the allocation for rotor thrusts without checking bounds.
///
/// The yaw row depends on the sign of each rotor's thrust, so the sign
/// pattern is iterated to a fixed point.
pub fn solve_allocation_with(
    wrench: &Wrench,
    params: &VehicleParams,
    coeffs: &ThrustCoefficients,
) -> Result<RotorCommand, DynamicsError> {
    let target = wrench.as_vector();
    let mut signs = [true; 4];
    for _ in 0..MAX_SIGN_ITERS {
        let ct = signs.map(|fwd| if fwd { coeffs.fwd } else { coeffs.rev });
        let b = allocation_matrix(params, &ct, wrench.frame);
        let u = b
            .lu()
            .solve(&target)
            .ok_or(DynamicsError::AllocationNonConvergence(0))?;
        let new_signs = [u[0] >= 0.0, u[1] >= 0.0, u[2] >= 0.0, u[3] >= 0.0];
        if new_signs == signs {
            return Ok(RotorCommand([u[0], u[1], u[2], u[3]]));
        }
        // A rotor whose solution sits at zero is consistent with either sign.
        let flipped_at_zero = (0..4).all(|j| new_signs[j] == signs[j] || u[j].abs() < 1e-12);
        if flipped_at_zero {
            return Ok(RotorCommand([u[0], u[1], u[2], u[3]]));
        }
        signs = new_signs;
    }
    Err(DynamicsError::AllocationNonConvergence(MAX_SIGN_ITERS))
}

pub fn solve_allocation(
    wrench: &Wrench,
    params: &VehicleParams,
    medium: Medium,
) -> Result<RotorCommand, DynamicsError> {
    solve_allocation_with(wrench, params, &ThrustCoefficients::for_medium(params, medium))
}

/// Rotor thrusts realizing a wrench, rejecting commands outside the
/// medium's thrust bounds (the unclipped command is returned in the error).
pub fn invert_allocation(
    wrench: &Wrench,
    params: &VehicleParams,
    medium: Medium,
) -> Result<RotorCommand, DynamicsError> {
    let u = solve_allocation(wrench, params, medium)?;
    let (lo, hi) = params.thrust_bounds(medium);
    if !u.within(lo, hi) {
        return Err(DynamicsError::OutOfBounds { command: u, lo, hi });
    }
    Ok(u)
}

fn quadratic(c: &Vector3<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    c.component_mul(v) * v.norm()
}

pub fn hydro_forces(state: &HybridState, params: &VehicleParams, medium: Medium) -> HydroForces {
    hydro_forces_scaled(state, params, medium.zeta())
}

fn hydro_forces_scaled(state: &HybridState, params: &VehicleParams, body: f64) -> HydroForces {
    if body == 0.0 {
        return HydroForces {
            f_drag: Vector3::zeros(),
            tau_drag: Vector3::zeros(),
            f_b: Vector3::zeros(),
            tau_buo: Vector3::zeros(),
        };
    }
    let r = rotation_a_to_w(&state.theta_a);
    let f_b = Vector3::new(0.0, 0.0, params.buoyancy() * body);
    HydroForces {
        f_drag: quadratic(&params.drag_force, &state.v_a) * body,
        tau_drag: quadratic(&params.drag_torque, &state.w_a) * body,
        f_b,
        tau_buo: params.r_buoy.cross(&(r.transpose() * f_b)),
    }
}

/// Flight-mode derivative (translation in the mass frame, ZYX attitude).
/// Ground coordinates get a zero derivative; they are re-derived after the
/// step.
pub fn flight_derivative(
    state: &HybridState,
    u: &RotorCommand,
    params: &VehicleParams,
    medium: Medium,
) -> Result<StateVector, DynamicsError> {
    if state.mode.is_ground() {
        return Err(DynamicsError::WrongMode(state.mode));
    }
    flight_derivative_immersed(state, u, params, Immersion::of(medium))
}

pub fn flight_derivative_immersed(
    state: &HybridState,
    u: &RotorCommand,
    params: &VehicleParams,
    immersion: Immersion,
) -> Result<StateVector, DynamicsError> {
    let zeta = immersion.body;
    let coeffs = ThrustCoefficients::blended(params, immersion.rotors);
    let wrench = allocate_with(u, params, &coeffs, Frame::A);
    let r = rotation_a_to_w(&state.theta_a);
    let w = euler_rate_matrix(&state.theta_a)?;
    let hydro = hydro_forces_scaled(state, params, zeta);

    let mass = params.m + zeta * params.m_a;
    let inertia = params.inertia_a + params.added_inertia * zeta;
    let gravity = Vector3::new(0.0, 0.0, params.weight());

    let force = Vector3::new(0.0, 0.0, wrench.thrust) - r.transpose() * gravity - hydro.f_drag
        + r.transpose() * hydro.f_b;
    let v_dot = -state.w_a.cross(&state.v_a) + force / mass;
    let gyro = state.w_a.cross(&inertia.component_mul(&state.w_a));
    let w_dot = (wrench.torque - gyro - hydro.tau_drag).component_div(&inertia);

    let mut d = StateVector::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&(r * state.v_a));
    d.fixed_rows_mut::<3>(3).copy_from(&v_dot);
    d.fixed_rows_mut::<3>(6).copy_from(&(w * state.w_a));
    d.fixed_rows_mut::<3>(11).copy_from(&w_dot);
    Ok(d)
}

/// Geometric-frame inertia including added inertia.
pub fn ground_inertia(params: &VehicleParams, zeta: f64) -> Vector3<f64> {
    params.inertia_t + frame_t_from_a(&params.added_inertia).abs() * zeta
}

/// Gravity moment about the wheel axis as it enters the ground torque
/// balance (subtracted from the control torque).
pub fn gravity_moment(params: &VehicleParams, theta_t: f64) -> Vector3<f64> {
    Vector3::new(0.0, params.weight() * params.delta * theta_t.sin(), 0.0)
}

/// Buoyancy moment about the geometric center in ground mode, with the same
/// sign convention as [`gravity_moment`].
pub fn ground_buoyancy_moment(params: &VehicleParams, theta_t: f64, psi_t: f64, body: f64) -> Vector3<f64> {
    let r_cb = Vector3::new(0.0, 0.0, -params.delta) + frame_t_from_a(&params.r_buoy);
    let f_b = rotation_t_to_w(theta_t, psi_t).transpose()
        * Vector3::new(0.0, 0.0, params.buoyancy() * body);
    -r_cb.cross(&f_b)
}

/// Drag moment on the ground, geometric frame.
pub fn ground_drag_moment(params: &VehicleParams, w_t: &Vector3<f64>, body: f64) -> Vector3<f64> {
    quadratic(&frame_t_from_a(&params.drag_torque).abs(), w_t) * body
}

/// Magnitude of the translational drag for a ground-mode state, evaluated
/// with the mass-frame velocity implied by `(v_l, theta_T, psi_T)`.
pub fn ground_drag_magnitude(params: &VehicleParams, v_l: f64, theta_t: f64, psi_t: f64) -> f64 {
    let v_w = Vector3::new(v_l * psi_t.cos(), v_l * psi_t.sin(), 0.0);
    let r_wa = rotation_a_to_w(&Vector3::new(0.0, theta_t + std::f64::consts::FRAC_PI_2, psi_t));
    quadratic(&params.drag_force, &(r_wa.transpose() * v_w)).norm()
}

/// Ground-mode derivative (planar rolling, pitch about the wheel axis,
/// heading).
pub fn ground_derivative(
    state: &HybridState,
    u: &RotorCommand,
    params: &VehicleParams,
    medium: Medium,
) -> Result<StateVector, DynamicsError> {
    if !state.mode.is_ground() {
        return Err(DynamicsError::WrongMode(state.mode));
    }
    ground_derivative_zeta(state, u, params, medium, medium.zeta())
}

fn ground_derivative_zeta(
    state: &HybridState,
    u: &RotorCommand,
    params: &VehicleParams,
    medium: Medium,
    zeta: f64,
) -> Result<StateVector, DynamicsError> {
    let (theta, psi) = (state.theta_t, state.psi_t);
    let ct = theta.cos();
    if ct.abs() < 1e-6 {
        return Err(DynamicsError::GroundSingularity(theta));
    }
    let wrench = allocate_terrestrial(u, params, medium);
    let mass = params.m + zeta * params.m_a;

    let drag = if zeta > 0.0 {
        zeta * ground_drag_magnitude(params, state.v_l, theta, psi) * state.v_l.signum()
    } else {
        0.0
    };
    let v_l_dot =
        (wrench.thrust * ct - drag - params.rolling_resistance * state.v_l) / mass;

    let inertia = ground_inertia(params, zeta);
    let w = state.w_t;
    let gyro = w.cross(&inertia.component_mul(&w));
    let mut load = gravity_moment(params, theta);
    if zeta > 0.0 {
        load += ground_buoyancy_moment(params, theta, psi, zeta) + ground_drag_moment(params, &w, zeta);
    }
    let w_dot = (wrench.torque - gyro - load).component_div(&inertia);

    let mut d = StateVector::zeros();
    d[0] = state.v_l * psi.cos();
    d[1] = state.v_l * psi.sin();
    d[9] = w.y;
    d[10] = w.z / ct;
    d.fixed_rows_mut::<3>(14).copy_from(&w_dot);
    d[17] = v_l_dot;
    Ok(d)
}
