//! PMSM in the rotor dq frame, a cascaded FOC drive and a sensorless ESC
//! caricature.

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

pub const RPM: f64 = TAU / 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotorParams {
    pub r_s: f64,
    pub l_d: f64,
    pub l_q: f64,
    /// Permanent-magnet flux linkage, Wb.
    pub flux: f64,
    pub pole_pairs: u32,
    /// Rotor plus propeller inertia, kg m^2.
    pub inertia: f64,
    /// Viscous friction, N m s.
    pub friction: f64,
    pub v_limit: f64,
    pub i_limit: f64,
    /// Electrical speed ceiling, eRPM.
    pub erpm_limit: f64,
}

impl Default for MotorParams {
    /// A 2312-size 1150 KV outrunner on a 4S pack.
    fn default() -> Self {
        let kv = 1150.0;
        let pole_pairs = 7;
        let kt = 60.0 / (TAU * kv);
        Self {
            r_s: 0.12,
            l_d: 25e-6,
            l_q: 25e-6,
            flux: kt / (1.5 * pole_pairs as f64),
            pole_pairs,
            inertia: 2e-6,
            friction: 1e-7,
            v_limit: 16.8,
            i_limit: 30.0,
            erpm_limit: 200_000.0,
        }
    }
}

impl MotorParams {
    pub fn validate(&self) -> Result<(), String> {
        let pos = [self.r_s, self.l_d, self.l_q, self.flux, self.inertia, self.friction, self.v_limit, self.i_limit, self.erpm_limit];
        if pos.iter().any(|v| !(*v > 0.0)) || self.pole_pairs == 0 {
            return Err("motor parameters must be positive".into());
        }
        if self.i_limit * self.r_s > 10.0 * self.v_limit {
            return Err("current limit unreachable from the voltage limit".into());
        }
        Ok(())
    }

    pub fn torque_constant(&self) -> f64 {
        1.5 * self.pole_pairs as f64 * self.flux
    }

    /// Mechanical speed ceiling implied by the eRPM bound, rad/s.
    pub fn speed_ceiling(&self) -> f64 {
        self.erpm_limit / self.pole_pairs as f64 * RPM
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotorState {
    pub i_d: f64,
    pub i_q: f64,
    /// Electrical angle, unwrapped.
    pub theta_e: f64,
    /// Mechanical speed, rad/s.
    pub omega: f64,
}

impl MotorState {
    pub fn rpm(&self) -> f64 {
        self.omega / RPM
    }

    pub fn mech_angle(&self, p: &MotorParams) -> f64 {
        self.theta_e / p.pole_pairs as f64
    }
}

pub fn electromagnetic_torque(p: &MotorParams, s: &MotorState) -> f64 {
    1.5 * p.pole_pairs as f64 * (p.flux * s.i_q + (p.l_d - p.l_q) * s.i_d * s.i_q)
}

fn deriv(p: &MotorParams, s: &MotorState, v: &Vector2<f64>, load: f64) -> [f64; 4] {
    let pp = p.pole_pairs as f64;
    let we = pp * s.omega;
    let did = (v.x - p.r_s * s.i_d + we * p.l_q * s.i_q) / p.l_d;
    let diq = (v.y - p.r_s * s.i_q - we * p.l_d * s.i_d - we * p.flux) / p.l_q;
    let dw = (electromagnetic_torque(p, s) - load - p.friction * s.omega) / p.inertia;
    [did, diq, we, dw]
}

fn add(s: &MotorState, k: &[f64; 4], h: f64) -> MotorState {
    MotorState {
        i_d: s.i_d + k[0] * h,
        i_q: s.i_q + k[1] * h,
        theta_e: s.theta_e + k[2] * h,
        omega: s.omega + k[3] * h,
    }
}

/// One RK4 step of the dq model. `load` is the shaft load torque, already
/// signed against the rotation.
pub fn motor_step(p: &MotorParams, s: &MotorState, v_dq: &Vector2<f64>, load: f64, dt: f64) -> MotorState {
    let k1 = deriv(p, s, v_dq, load);
    let k2 = deriv(p, &add(s, &k1, 0.5 * dt), v_dq, load);
    let k3 = deriv(p, &add(s, &k2, 0.5 * dt), v_dq, load);
    let k4 = deriv(p, &add(s, &k3, dt), v_dq, load);
    let k: [f64; 4] = std::array::from_fn(|i| (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]) / 6.0);
    add(s, &k, dt)
}

/// Electrical input power, W.
pub fn electrical_power(s: &MotorState, v_dq: &Vector2<f64>) -> f64 {
    1.5 * (v_dq.x * s.i_d + v_dq.y * s.i_q)
}

fn clamp_circle(v: Vector2<f64>, limit: f64) -> Vector2<f64> {
    let n = v.norm();
    if n > limit {
        v * (limit / n)
    } else {
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocGains {
    /// Speed loop, A per rad/s and A per rad.
    pub speed_kp: f64,
    pub speed_ki: f64,
    pub speed_period: f64,
    /// Current loops, V per A and V per A s.
    pub current_kp: f64,
    pub current_ki: f64,
    pub decoupling: bool,
    pub encoder_bits: u32,
}

impl Default for FocGains {
    fn default() -> Self {
        let p = MotorParams::default();
        let wc = TAU * 1000.0;
        Self {
            speed_kp: 0.12,
            speed_ki: 20.0,
            speed_period: 1e-3,
            current_kp: p.l_q * wc,
            current_ki: p.r_s * wc,
            decoupling: true,
            encoder_bits: 14,
        }
    }
}

/// Speed PI producing `I_q_ref` (with `I_d_ref = 0`), inner dq current PI
/// with decoupling feed-forward, 14-bit absolute encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FocController {
    pub gains: FocGains,
    speed_int: f64,
    id_int: f64,
    iq_int: f64,
    iq_ref: f64,
    since_speed: f64,
    last_angle: Option<f64>,
    speed_est: f64,
}

impl FocController {
    pub fn new(gains: FocGains) -> Self {
        Self {
            speed_int: 0.0,
            id_int: 0.0,
            iq_int: 0.0,
            iq_ref: 0.0,
            since_speed: gains.speed_period,
            last_angle: None,
            speed_est: 0.0,
            gains,
        }
    }

    /// Start from the steady state of a motor already spinning with
    /// current `iq`.
    pub fn preload(&mut self, iq: f64, s: &MotorState, p: &MotorParams) {
        self.speed_int = iq;
        self.iq_ref = iq;
        self.iq_int = p.r_s * iq;
        self.id_int = 0.0;
        self.speed_est = s.omega;
        self.last_angle = Some(self.encoder(s.mech_angle(p)));
        self.since_speed = 0.0;
    }

    pub fn iq_ref(&self) -> f64 {
        self.iq_ref
    }

    pub fn speed_estimate(&self) -> f64 {
        self.speed_est
    }

    fn encoder(&self, angle: f64) -> f64 {
        let q = TAU / f64::from(1u32 << self.gains.encoder_bits);
        (angle / q).floor() * q
    }

    /// Speed-loop output for a measured speed, without touching the
    /// current loops.
    pub fn speed_loop(&mut self, omega_ref: f64, omega_meas: f64, p: &MotorParams, dt: f64) -> f64 {
        let g = &self.gains;
        let e = omega_ref - omega_meas;
        let cand = self.speed_int + g.speed_ki * e * dt;
        let raw = g.speed_kp * e + cand;
        if raw.abs() <= p.i_limit || raw.signum() != e.signum() {
            self.speed_int = cand.clamp(-p.i_limit, p.i_limit);
        }
        self.iq_ref = (g.speed_kp * e + self.speed_int).clamp(-p.i_limit, p.i_limit);
        self.iq_ref
    }

    /// Voltage command for the next electrical step. `omega_ref` in rad/s.
    pub fn step(&mut self, omega_ref: f64, s: &MotorState, p: &MotorParams, dt: f64) -> Vector2<f64> {
        let angle = self.encoder(s.mech_angle(p));
        self.since_speed += dt;
        if self.since_speed >= self.gains.speed_period - 1e-12 {
            let period = self.since_speed;
            if let Some(last) = self.last_angle {
                self.speed_est = (angle - last) / period;
            }
            self.last_angle = Some(angle);
            self.since_speed = 0.0;
            let est = self.speed_est;
            self.speed_loop(omega_ref, est, p, period);
        }
        let iq_ref = self.iq_ref;
        self.current_step(iq_ref, s, p, dt)
    }

    /// Inner dq current loops only, tracking `iq_ref` with `I_d_ref = 0`.
    pub fn current_step(&mut self, iq_ref: f64, s: &MotorState, p: &MotorParams, dt: f64) -> Vector2<f64> {
        let pp = p.pole_pairs as f64;
        let angle = self.encoder(s.mech_angle(p));
        // Currents seen through the quantized rotor angle.
        let err = s.theta_e - angle * pp;
        let (se, ce) = err.sin_cos();
        let i_d = ce * s.i_d - se * s.i_q;
        let i_q = se * s.i_d + ce * s.i_q;

        let g = &self.gains;
        let we = pp * self.speed_est;
        let (ed, eq) = (-i_d, iq_ref - i_q);
        let (mut ffd, mut ffq) = (0.0, 0.0);
        if g.decoupling {
            ffd = -we * p.l_q * i_q;
            ffq = we * (p.l_d * i_d + p.flux);
        }
        let cand_d = self.id_int + g.current_ki * ed * dt;
        let cand_q = self.iq_int + g.current_ki * eq * dt;
        let raw = Vector2::new(g.current_kp * ed + cand_d + ffd, g.current_kp * eq + cand_q + ffq);
        if raw.norm() <= p.v_limit {
            self.id_int = cand_d;
            self.iq_int = cand_q;
        }
        let v = clamp_circle(
            Vector2::new(g.current_kp * ed + self.id_int + ffd, g.current_kp * eq + self.iq_int + ffq),
            p.v_limit,
        );
        // Back to the true rotor frame.
        Vector2::new(ce * v.x + se * v.y, -se * v.x + ce * v.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EscConfig {
    pub update_period: f64,
    /// Relative noise of the speed estimate at low speed.
    pub noise_frac: f64,
    /// Relative over-read of the speed estimate at low speed.
    pub estimate_bias: f64,
    pub stall_rpm: f64,
    /// Duty PI on speed, V per rad/s and V per rad.
    pub kp: f64,
    pub ki: f64,
    /// Authority of the integral term, V.
    pub i_limit: f64,
    /// Commutation timing error of the six-step drive at and below
    /// `knee_rpm`, degrees. Above the knee it falls off as `1/rpm`.
    pub timing_error_deg: f64,
    /// Speed where zero-crossing detection becomes reliable, RPM.
    pub knee_rpm: f64,
    /// Forward drop of the freewheeling diodes, V.
    pub diode_drop: f64,
    pub startup_voltage: f64,
    pub startup_time: f64,
    pub seed: u64,
}

impl Default for EscConfig {
    fn default() -> Self {
        Self {
            update_period: 0.02,
            noise_frac: 0.05,
            estimate_bias: 0.08,
            stall_rpm: 150.0,
            kp: 0.004,
            ki: 1.0,
            i_limit: 16.0,
            timing_error_deg: 55.0,
            knee_rpm: 500.0,
            diode_drop: 0.7,
            startup_voltage: 1.0,
            startup_time: 0.12,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EscPhase {
    Run,
    Brake,
    Startup,
}

/// Sensorless six-step ESC: zero-crossing speed estimate with noise and a
/// 20 ms update, duty command from a feed-forward plus a limited PI, fixed
/// commutation timing error, stop-and-restart on direction reversal.
#[derive(Debug, Clone)]
pub struct EscController {
    pub cfg: EscConfig,
    rng: ChaCha8Rng,
    since_update: f64,
    pending: Option<f64>,
    estimate: Option<f64>,
    integ: f64,
    voltage: f64,
    phase: EscPhase,
    phase_t: f64,
    direction: f64,
    stalled: bool,
    phi: f64,
}

impl EscController {
    pub fn new(cfg: EscConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self {
            cfg,
            rng,
            since_update: f64::INFINITY,
            pending: None,
            estimate: None,
            integ: 0.0,
            voltage: 0.0,
            phase: EscPhase::Run,
            phase_t: 0.0,
            direction: 1.0,
            stalled: false,
            phi: 0.0,
        }
    }

    /// True while the speed estimate is unreliable.
    pub fn stalled(&self) -> bool {
        self.stalled
    }

    pub fn estimate(&self) -> Option<f64> {
        self.estimate
    }

    /// Diode conduction during the PWM off-time of an asynchronous drive.
    pub fn freewheel_loss(&self, s: &MotorState, v: &Vector2<f64>, p: &MotorParams) -> f64 {
        let duty = (v.norm() / p.v_limit).min(1.0);
        self.cfg.diode_drop * s.i_d.hypot(s.i_q) * (1.0 - duty)
    }

    fn sample(&mut self, omega: f64) -> Option<f64> {
        let rpm = omega.abs() / RPM;
        if rpm < self.cfg.stall_rpm {
            return None;
        }
        let k = self.knee(rpm);
        let sigma = self.cfg.noise_frac * rpm * k * k * RPM;
        let n = Normal::new(0.0, sigma).map(|d| d.sample(&mut self.rng)).unwrap_or(0.0);
        Some(omega * (1.0 + self.cfg.estimate_bias * k) + n)
    }

    /// 1 at and below the knee, `knee/rpm` above it.
    fn knee(&self, rpm: f64) -> f64 {
        (self.cfg.knee_rpm / rpm.abs().max(1e-9)).min(1.0)
    }

    fn timing_error(&self, omega_ref: f64) -> f64 {
        self.cfg.timing_error_deg.to_radians() * self.knee(omega_ref / RPM)
    }

    fn feedforward(&self, p: &MotorParams, omega_ref: f64) -> f64 {
        p.pole_pairs as f64 * p.flux * omega_ref / self.timing_error(omega_ref).cos()
    }

    pub fn step(&mut self, omega_ref: f64, s: &MotorState, p: &MotorParams, dt: f64) -> Vector2<f64> {
        self.since_update += dt;
        self.phase_t += dt;
        if self.since_update >= self.cfg.update_period - 1e-12 {
            let ts = self.since_update;
            self.since_update = 0.0;
            // The estimate delivered now was taken one update ago.
            self.estimate = self.pending;
            self.pending = self.sample(s.omega);
            self.stalled = self.estimate.is_none();
            self.update(omega_ref, s, p, ts);
        }
        let phi = self.phi;
        // Six-step drive: the voltage vector only moves every 60 degrees.
        let sector = PI / 3.0;
        // Within a sector the fixed stator vector falls behind the rotor.
        let saw = 0.5 * sector - (s.theta_e * self.direction).rem_euclid(sector);
        let a = phi + saw;
        let v = self.voltage;
        Vector2::new(-v.abs() * a.sin(), v * a.cos())
    }

    fn update(&mut self, omega_ref: f64, s: &MotorState, p: &MotorParams, ts: f64) {
        let want = if omega_ref >= 0.0 { 1.0 } else { -1.0 };
        self.phi = self.timing_error(omega_ref);
        let stall = self.cfg.stall_rpm * RPM;
        if omega_ref == 0.0 {
            self.voltage = 0.0;
            self.integ = 0.0;
            self.phase = EscPhase::Run;
            return;
        }
        if want != self.direction {
            self.direction = want;
            self.phase = EscPhase::Brake;
            self.phase_t = 0.0;
            self.integ = 0.0;
        }
        match self.phase {
            EscPhase::Brake => {
                self.voltage = 0.0;
                if s.omega.abs() < stall || s.omega * want > 0.0 {
                    self.phase = EscPhase::Startup;
                    self.phase_t = 0.0;
                }
            }
            EscPhase::Startup => {
                self.voltage = want * self.cfg.startup_voltage;
                if self.phase_t >= self.cfg.startup_time {
                    self.phase = EscPhase::Run;
                }
            }
            EscPhase::Run => match self.estimate {
                None => self.voltage = want * self.cfg.startup_voltage.max(self.feedforward(p, omega_ref).abs()),
                Some(est) => {
                    let e = omega_ref - est;
                    // The loop gain of the plant grows with speed in light loads.
                    let k = self.knee(omega_ref / RPM).powi(2);
                    self.integ = (self.integ + self.cfg.ki * k * e * ts).clamp(-self.cfg.i_limit, self.cfg.i_limit);
                    let v = self.feedforward(p, omega_ref) + self.cfg.kp * k * e + self.integ;
                    self.voltage = v.clamp(-p.v_limit, p.v_limit);
                }
            },
        }
    }
}
