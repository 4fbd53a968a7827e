//! Cascaded PID attitude control for swimming and for the water-to-air
//! transition, plus allocation of the torque demand to rotor thrusts.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::dynamics::{allocate_with, solve_allocation_with, DynamicsError, Frame, ThrustCoefficients, Wrench};
use crate::model::{wrap_angle, HybridState, Medium, MotionMode, RotorCommand, VehicleParams};

/// Diagonal PID gains with integrator and output clamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: Vector3<f64>,
    pub ki: Vector3<f64>,
    pub kd: Vector3<f64>,
    /// Bound on the integral of the error.
    pub i_limit: Vector3<f64>,
    pub out_limit: Vector3<f64>,
    #[serde(default = "default_cutoff")]
    pub d_cutoff_hz: f64,
}

fn default_cutoff() -> f64 {
    20.0
}

impl PidGains {
    pub fn p_only(kp: Vector3<f64>) -> Self {
        Self {
            kp,
            ki: Vector3::zeros(),
            kd: Vector3::zeros(),
            i_limit: Vector3::repeat(1.0),
            out_limit: Vector3::repeat(f64::INFINITY),
            d_cutoff_hz: default_cutoff(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = self.kp.iter().chain(self.ki.iter()).chain(self.kd.iter());
        if all.into_iter().any(|g| !(*g >= 0.0)) {
            return Err("PID gains must be non-negative".into());
        }
        if self.i_limit.iter().any(|l| !(*l > 0.0)) || self.out_limit.iter().any(|l| !(*l > 0.0)) {
            return Err("PID limits must be positive".into());
        }
        if !(self.d_cutoff_hz > 0.0) {
            return Err("derivative cutoff must be positive".into());
        }
        Ok(())
    }

    /// Underwater angle-loop defaults (torque output).
    pub fn underwater_angle() -> Self {
        Self {
            kp: Vector3::new(2.0, 2.0, 0.2),
            ki: Vector3::new(0.2, 0.2, 0.05),
            kd: Vector3::new(0.1, 0.1, 0.02),
            i_limit: Vector3::repeat(0.5),
            out_limit: Vector3::new(1.0, 1.0, 0.4),
            d_cutoff_hz: 20.0,
        }
    }

    /// Aerial outer loop: angle error to body-rate setpoint.
    pub fn aerial_angle() -> Self {
        Self {
            out_limit: Vector3::new(4.0, 4.0, 2.0),
            ..Self::p_only(Vector3::new(7.0, 7.0, 4.0))
        }
    }

    /// Aerial inner loop: rate error to torque.
    pub fn aerial_rate() -> Self {
        Self {
            kp: Vector3::new(0.25, 0.04, 0.25),
            ki: Vector3::new(0.1, 0.02, 0.1),
            kd: Vector3::new(0.002, 0.0003, 0.0),
            i_limit: Vector3::repeat(0.5),
            out_limit: Vector3::new(0.3, 0.08, 0.05),
            d_cutoff_hz: 20.0,
        }
    }
}

/// Three independent PID channels. Derivative acts on the measurement
/// through a first-order filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Pid3 {
    pub gains: PidGains,
    wrap: bool,
    integ: Vector3<f64>,
    d_filt: Vector3<f64>,
    prev_meas: Option<Vector3<f64>>,
}

impl Pid3 {
    /// Channels whose errors are wrapped to `(-pi, pi]`.
    pub fn angle(gains: PidGains) -> Self {
        Self {
            gains,
            wrap: true,
            integ: Vector3::zeros(),
            d_filt: Vector3::zeros(),
            prev_meas: None,
        }
    }

    pub fn rate(gains: PidGains) -> Self {
        Self {
            wrap: false,
            ..Self::angle(gains)
        }
    }

    pub fn reset(&mut self) {
        self.integ = Vector3::zeros();
        self.d_filt = Vector3::zeros();
        self.prev_meas = None;
    }

    pub fn integrator(&self) -> Vector3<f64> {
        self.integ
    }

    fn diff(&self, a: f64, b: f64) -> f64 {
        if self.wrap {
            wrap_angle(a - b)
        } else {
            a - b
        }
    }

    pub fn step(&mut self, setpoint: &Vector3<f64>, meas: &Vector3<f64>, dt: f64) -> Vector3<f64> {
        let g = &self.gains;
        let e = Vector3::from_fn(|i, _| self.diff(setpoint[i], meas[i]));
        let d_raw = match self.prev_meas {
            Some(prev) => Vector3::from_fn(|i, _| -self.diff(meas[i], prev[i]) / dt),
            None => Vector3::zeros(),
        };
        let tau_f = 1.0 / (TAU * g.d_cutoff_hz);
        let alpha = dt / (dt + tau_f);
        self.d_filt += (d_raw - self.d_filt) * alpha;
        self.prev_meas = Some(*meas);

        let mut out = Vector3::zeros();
        for i in 0..3 {
            let pd = g.kp[i] * e[i] + g.kd[i] * self.d_filt[i];
            let candidate = (self.integ[i] + e[i] * dt).clamp(-g.i_limit[i], g.i_limit[i]);
            let raw = pd + g.ki[i] * candidate;
            let lim = g.out_limit[i];
            // Conditional integration: hold the integrator while the output
            // is saturated in the direction the error pushes.
            let saturating = raw.abs() > lim && raw.signum() == e[i].signum();
            if !saturating {
                self.integ[i] = candidate;
            }
            out[i] = (pd + g.ki[i] * self.integ[i]).clamp(-lim, lim);
        }
        out
    }
}

/// Underwater attitude law: angle error straight to torque.
pub fn attitude_pid_step(pid: &mut Pid3, theta_des: &Vector3<f64>, theta: &Vector3<f64>, dt: f64) -> Vector3<f64> {
    pid.step(theta_des, theta, dt)
}

/// Aerial cascade: the outer loop tracks angle, the inner loop angular
/// velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct AttitudeCascade {
    pub angle: Pid3,
    pub rate: Pid3,
}

impl Default for AttitudeCascade {
    fn default() -> Self {
        Self::new(PidGains::aerial_angle(), PidGains::aerial_rate())
    }
}

impl AttitudeCascade {
    pub fn new(angle: PidGains, rate: PidGains) -> Self {
        Self {
            angle: Pid3::angle(angle),
            rate: Pid3::rate(rate),
        }
    }

    pub fn reset(&mut self) {
        self.angle.reset();
        self.rate.reset();
    }

    pub fn step(&mut self, theta_des: &Vector3<f64>, theta: &Vector3<f64>, omega: &Vector3<f64>, dt: f64) -> Vector3<f64> {
        let omega_des = self.angle.step(theta_des, theta, dt);
        cascade_rate_loop(&mut self.rate, &omega_des, omega, dt)
    }
}

pub fn cascade_rate_loop(pid: &mut Pid3, omega_des: &Vector3<f64>, omega: &Vector3<f64>, dt: f64) -> Vector3<f64> {
    pid.step(omega_des, omega, dt)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidAllocation {
    pub u: RotorCommand,
    /// Fraction of the roll and pitch demand that was realized.
    pub torque_scale: f64,
    /// Fraction of the yaw demand that was realized.
    pub yaw_scale: f64,
    pub saturated: bool,
}

fn bisect(mut feasible: impl FnMut(f64) -> Result<bool, DynamicsError>) -> Result<f64, DynamicsError> {
    let (mut a, mut b) = (0.0, 1.0);
    for _ in 0..40 {
        let m = 0.5 * (a + b);
        if feasible(m)? {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(a)
}

/// Rotor thrusts for a collective and torque demand. Frame T on the
/// seabed or land, frame A otherwise. When the demand exceeds the rotor
/// bounds the collective is kept, yaw is given up first, then roll and
/// pitch are scaled down together. If the collective alone is infeasible
/// it is clamped.
pub fn pid_allocate(
    tau: &Vector3<f64>,
    collective: f64,
    medium: Medium,
    mode: MotionMode,
    params: &VehicleParams,
) -> Result<PidAllocation, DynamicsError> {
    let frame = if mode.is_ground() { Frame::T } else { Frame::A };
    let coeffs = ThrustCoefficients::for_medium(params, medium);
    let (lo, hi) = params.thrust_bounds(medium);
    let solve = |t: f64, rp: f64, yaw: f64| {
        let torque = Vector3::new(tau.x * rp, tau.y * rp, tau.z * yaw);
        solve_allocation_with(&Wrench::new(t, torque, frame), params, &coeffs)
    };
    let done = |u: RotorCommand, rp: f64, yaw: f64, saturated: bool| PidAllocation {
        u: u.clamp(lo, hi),
        torque_scale: rp,
        yaw_scale: yaw,
        saturated,
    };

    let full = solve(collective, 1.0, 1.0)?;
    if full.within(lo, hi) {
        return Ok(done(full, 1.0, 1.0, false));
    }
    let t = collective.clamp(4.0 * lo, 4.0 * hi);
    let bare = solve(t, 0.0, 0.0)?;
    if !bare.within(lo, hi) {
        return Ok(done(bare, 0.0, 0.0, true));
    }
    if solve(t, 1.0, 0.0)?.within(lo, hi) {
        let yaw = bisect(|s| Ok(solve(t, 1.0, s)?.within(lo, hi)))?;
        return Ok(done(solve(t, 1.0, yaw)?, 1.0, yaw, true));
    }
    let rp = bisect(|s| Ok(solve(t, s, 0.0)?.within(lo, hi)))?;
    Ok(done(solve(t, rp, 0.0)?, rp, 0.0, true))
}

/// Realized wrench of a PID allocation, for checks.
pub fn pid_wrench(u: &RotorCommand, medium: Medium, mode: MotionMode, params: &VehicleParams) -> Wrench {
    let frame = if mode.is_ground() { Frame::T } else { Frame::A };
    allocate_with(u, params, &ThrustCoefficients::for_medium(params, medium), frame)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaterExitConfig {
    /// Collective at the end of the ramp, as a multiple of the weight.
    pub climb_ratio: f64,
    pub ramp_time: f64,
    /// All rotors above this speed means the vehicle has left the water.
    pub airborne_rpm: f64,
    pub stable_angle_deg: f64,
    pub stable_time: f64,
    pub timeout: f64,
    /// Horizontal velocity damping once airborne, 1/s. The attitude
    /// setpoint tilts against the drift by `velocity_damping * v / g`.
    pub velocity_damping: f64,
    /// Bound on that tilt, degrees.
    pub max_tilt_deg: f64,
    /// Cap on the collective, N. Used to model a weak vehicle.
    pub max_collective: Option<f64>,
    pub angle: PidGains,
    pub rate: PidGains,
}

impl Default for WaterExitConfig {
    fn default() -> Self {
        Self {
            climb_ratio: 1.25,
            ramp_time: 0.3,
            airborne_rpm: 3000.0,
            stable_angle_deg: 5.0,
            stable_time: 0.3,
            timeout: 5.0,
            velocity_damping: 2.0,
            max_tilt_deg: 3.0,
            max_collective: None,
            angle: PidGains::aerial_angle(),
            rate: PidGains::aerial_rate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitPhase {
    Surface,
    Airborne,
    Stable,
    Aborted,
}

impl ExitPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitPhase::Surface => "surface",
            ExitPhase::Airborne => "airborne",
            ExitPhase::Stable => "stable",
            ExitPhase::Aborted => "aborted",
        }
    }
}

/// PID takeoff from the water surface. Detects leaving the water from the
/// rotor speeds and reports `Stable` once the attitude has settled.
#[derive(Debug, Clone)]
pub struct WaterExitController {
    pub cfg: WaterExitConfig,
    cascade: AttitudeCascade,
    t: f64,
    start_collective: f64,
    phase: ExitPhase,
    settled_for: f64,
}

impl WaterExitController {
    pub fn new(cfg: WaterExitConfig, start_collective: f64) -> Self {
        let cascade = AttitudeCascade::new(cfg.angle.clone(), cfg.rate.clone());
        Self {
            cfg,
            cascade,
            t: 0.0,
            start_collective,
            phase: ExitPhase::Surface,
            settled_for: 0.0,
        }
    }

    pub fn phase(&self) -> ExitPhase {
        self.phase
    }

    pub fn elapsed(&self) -> f64 {
        self.t
    }

    fn collective(&self, params: &VehicleParams, theta: &Vector3<f64>) -> f64 {
        let target = self.cfg.climb_ratio * params.weight();
        let s = (self.t / self.cfg.ramp_time).min(1.0);
        let mut c = self.start_collective + (target - self.start_collective) * s;
        if self.phase != ExitPhase::Surface {
            // Out of the water: climb gently with tilt compensation.
            let tilt = (theta.x.cos() * theta.y.cos()).max(0.5);
            c = params.weight() * 1.05 / tilt;
        }
        match self.cfg.max_collective {
            Some(m) => c.min(m),
            None => c,
        }
    }

    pub fn step(
        &mut self,
        state: &HybridState,
        target: &Vector3<f64>,
        rotor_rpm: &[f64; 4],
        params: &VehicleParams,
        dt: f64,
    ) -> Result<(RotorCommand, ExitPhase), DynamicsError> {
        self.t += dt;
        if self.phase == ExitPhase::Surface && rotor_rpm.iter().all(|w| w.abs() > self.cfg.airborne_rpm) {
            self.phase = ExitPhase::Airborne;
        }
        let mut setpoint = *target;
        if self.phase != ExitPhase::Surface {
            let v = state.velocity_w();
            let (s, c) = target.z.sin_cos();
            let (fwd, left) = (c * v.x + s * v.y, -s * v.x + c * v.y);
            let k = self.cfg.velocity_damping / params.g;
            let lim = self.cfg.max_tilt_deg.to_radians();
            setpoint.x += (k * left).clamp(-lim, lim);
            setpoint.y += (-k * fwd).clamp(-lim, lim);
        }
        if self.phase == ExitPhase::Airborne {
            let err = Vector3::from_fn(|i, _| wrap_angle(setpoint[i] - state.theta_a[i]).abs()).max();
            if err < self.cfg.stable_angle_deg.to_radians() {
                self.settled_for += dt;
            } else {
                self.settled_for = 0.0;
            }
            if self.settled_for >= self.cfg.stable_time - 1e-9 {
                self.phase = ExitPhase::Stable;
            }
        }
        if self.phase != ExitPhase::Stable && self.t > self.cfg.timeout {
            self.phase = ExitPhase::Aborted;
        }
        let tau = self.cascade.step(&setpoint, &state.theta_a, &state.w_a, dt);
        let collective = self.collective(params, &state.theta_a);
        let alloc = pid_allocate(&tau, collective, Medium::Air, MotionMode::FlightAir, params)?;
        Ok((alloc.u, self.phase))
    }
}
