//! Propulsion: electrical motor drives, propeller load, bench profiles and
//! the rotor bank used by vehicle scenarios.

pub mod motor;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Medium, RotorCommand, VehicleParams};
pub use motor::{
    electrical_power, electromagnetic_torque, motor_step, EscConfig, EscController, FocController, FocGains,
    MotorParams, MotorState, RPM,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropulsionError {
    #[error("empty trace window")]
    EmptyWindow,
}

/// Thrust and torque coefficients, N and N m per RPM^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropellerLoad {
    pub ct_air_fwd: f64,
    pub ct_air_rev: f64,
    pub ct_water_fwd: f64,
    pub ct_water_rev: f64,
    pub cq_air: f64,
    pub cq_water: f64,
}

impl PropellerLoad {
    /// Torque coefficients scale with the thrust coefficient between media.
    pub fn from_vehicle(p: &VehicleParams) -> Self {
        Self {
            ct_air_fwd: p.c_t_air_fwd,
            ct_air_rev: p.c_t_air_rev,
            ct_water_fwd: p.c_t_water_fwd,
            ct_water_rev: p.c_t_water_rev,
            cq_air: p.c_m,
            cq_water: p.c_m * p.c_t_water_fwd / p.c_t_air_fwd,
        }
    }

    /// Coefficients with a fraction of the disc in water.
    pub fn blend(&self, water: f64) -> (f64, f64, f64) {
        let s = water.clamp(0.0, 1.0);
        let mix = |a: f64, w: f64| (1.0 - s) * a + s * w;
        (
            mix(self.ct_air_fwd, self.ct_water_fwd),
            mix(self.ct_air_rev, self.ct_water_rev),
            mix(self.cq_air, self.cq_water),
        )
    }

    pub fn thrust_coefficient(&self, water: f64, thrust: f64) -> f64 {
        let (f, r, _) = self.blend(water);
        if thrust >= 0.0 {
            f
        } else {
            r
        }
    }

    /// Speed that produces `thrust`, RPM.
    pub fn rpm_for_thrust(&self, thrust: f64, water: f64) -> f64 {
        thrust.signum() * (thrust.abs() / self.thrust_coefficient(water, thrust)).sqrt()
    }
}

impl Default for PropellerLoad {
    fn default() -> Self {
        Self::from_vehicle(&VehicleParams::default())
    }
}

pub fn medium_fraction(m: Medium) -> f64 {
    m.zeta()
}

/// Thrust `c_t w|w|` and the shaft load torque `c_q w|w|` (opposing
/// rotation) at `rpm`.
pub fn propeller_coupling(load: &PropellerLoad, rpm: f64, water: f64) -> (f64, f64) {
    let (f, r, q) = load.blend(water);
    let ct = if rpm >= 0.0 { f } else { r };
    (ct * rpm * rpm.abs(), q * rpm * rpm.abs())
}

/// Shaft power of the propeller at `rpm`, W.
pub fn shaft_power(load: &PropellerLoad, rpm: f64, water: f64) -> f64 {
    let (_, tq) = propeller_coupling(load, rpm, water);
    tq * rpm * RPM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    Foc,
    Esc,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Driver {
    Foc(FocController),
    Esc(EscController),
}

impl Driver {
    pub fn new(kind: DriverKind, foc: &FocGains, esc: &EscConfig) -> Self {
        match kind {
            DriverKind::Foc => Driver::Foc(FocController::new(foc.clone())),
            DriverKind::Esc => Driver::Esc(EscController::new(esc.clone())),
        }
    }

    pub fn step(&mut self, omega_ref: f64, s: &MotorState, p: &MotorParams, dt: f64) -> Vector2<f64> {
        match self {
            Driver::Foc(c) => c.step(omega_ref, s, p, dt),
            Driver::Esc(c) => c.step(omega_ref, s, p, dt),
        }
    }
}

/// One motor, its driver and its propeller.
#[derive(Debug, Clone)]
pub struct DriveUnit {
    pub motor: MotorParams,
    pub state: MotorState,
    pub driver: Driver,
    pub load: PropellerLoad,
    last_v: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UnitOutput {
    pub thrust: f64,
    pub power: f64,
    pub v_dq: Vector2<f64>,
}

impl DriveUnit {
    pub fn new(motor: MotorParams, driver: Driver, load: PropellerLoad) -> Self {
        Self {
            motor,
            state: MotorState::default(),
            driver,
            load,
            last_v: Vector2::zeros(),
        }
    }

    /// Start spinning at `rpm` with the load already matched.
    pub fn settle_at(&mut self, rpm: f64, water: f64) {
        let (_, tq) = propeller_coupling(&self.load, rpm, water);
        self.state.omega = rpm * RPM;
        self.state.i_q = (tq + self.motor.friction * self.state.omega) / self.motor.torque_constant();
        if let Driver::Foc(c) = &mut self.driver {
            *c = FocController::new(c.gains.clone());
            c.preload(self.state.i_q, &self.state, &self.motor);
        }
    }

    /// Advance by `dt` (one electrical step) toward `rpm_ref`.
    pub fn step(&mut self, rpm_ref: f64, water: f64, dt: f64) -> UnitOutput {
        let v = self.driver.step(rpm_ref * RPM, &self.state, &self.motor, dt);
        let (thrust, tq) = propeller_coupling(&self.load, self.state.rpm(), water);
        let mut power = electrical_power(&self.state, &v);
        if let Driver::Esc(c) = &self.driver {
            power += c.freewheel_loss(&self.state, &v, &self.motor);
        }
        self.state = motor_step(&self.motor, &self.state, &v, tq, dt);
        let ceiling = self.motor.speed_ceiling();
        self.state.omega = self.state.omega.clamp(-ceiling, ceiling);
        self.last_v = v;
        UnitOutput { thrust, power, v_dq: v }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BenchProfile {
    Step { target_rpm: f64, t_step: f64, duration: f64 },
    Square { amplitude_rpm: f64, half_period: f64, periods: usize },
    Sweep { rpms: Vec<f64>, dwell: f64 },
}

impl BenchProfile {
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "step" => Some(Self::Step {
                target_rpm: 420.0,
                t_step: 0.1,
                duration: 1.5,
            }),
            "square" => Some(Self::Square {
                amplitude_rpm: 2100.0,
                half_period: 0.25,
                periods: 4,
            }),
            "sweep" => Some(Self::Sweep {
                rpms: (0..9).map(|k| 300.0 + 50.0 * k as f64).collect(),
                dwell: 1.0,
            }),
            _ => None,
        }
    }

    pub fn duration(&self) -> f64 {
        match self {
            Self::Step { duration, .. } => *duration,
            Self::Square {
                half_period, periods, ..
            } => 2.0 * half_period * *periods as f64 + half_period,
            Self::Sweep { rpms, dwell } => dwell * rpms.len() as f64,
        }
    }

    pub fn reference(&self, t: f64) -> f64 {
        match self {
            Self::Step { target_rpm, t_step, .. } => {
                if t >= *t_step {
                    *target_rpm
                } else {
                    0.0
                }
            }
            // The first half-period spins up from rest.
            Self::Square {
                amplitude_rpm,
                half_period,
                ..
            } => {
                let k = (t / half_period).floor() as i64;
                if k % 2 == 0 {
                    *amplitude_rpm
                } else {
                    -amplitude_rpm
                }
            }
            Self::Sweep { rpms, dwell } => {
                let k = ((t / dwell).floor() as usize).min(rpms.len() - 1);
                rpms[k]
            }
        }
    }
}

/// One logged bench row. Power and thrust are averaged over the log period.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BenchSample {
    pub t: f64,
    pub rpm_ref: f64,
    pub rpm: f64,
    pub i_d: f64,
    pub i_q: f64,
    pub v_d: f64,
    pub v_q: f64,
    pub power: f64,
    pub thrust: f64,
}

pub const BENCH_HEADER: &str = "t,omega_ref,omega,i_d,i_q,v_d,v_q,P,thrust";

impl BenchSample {
    pub fn csv_row(&self) -> String {
        [self.t, self.rpm_ref, self.rpm, self.i_d, self.i_q, self.v_d, self.v_q, self.power, self.thrust]
            .iter()
            .map(|v| crate::sim::fmt9(*v))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub motor: MotorParams,
    pub foc: FocGains,
    pub esc: EscConfig,
    /// Electrical step, s.
    pub dt: f64,
    pub log_period: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            motor: MotorParams::default(),
            foc: FocGains::default(),
            esc: EscConfig::default(),
            dt: 50e-6,
            log_period: 1e-3,
        }
    }
}

pub fn run_bench(profile: &BenchProfile, driver: DriverKind, medium: Medium, cfg: &BenchConfig) -> Vec<BenchSample> {
    let load = PropellerLoad::default();
    let water = medium_fraction(medium);
    let mut unit = DriveUnit::new(cfg.motor.clone(), Driver::new(driver, &cfg.foc, &cfg.esc), load);
    let steps_per_log = (cfg.log_period / cfg.dt).round().max(1.0) as usize;
    let n_logs = (profile.duration() / cfg.log_period).round() as usize;
    let mut out = Vec::with_capacity(n_logs);
    let mut k = 0usize;
    for j in 0..n_logs {
        let (mut p_sum, mut t_sum) = (0.0, 0.0);
        let mut last = UnitOutput::default();
        let mut rpm_ref = 0.0;
        for _ in 0..steps_per_log {
            let t = k as f64 * cfg.dt;
            rpm_ref = profile.reference(t);
            last = unit.step(rpm_ref, water, cfg.dt);
            p_sum += last.power;
            t_sum += last.thrust;
            k += 1;
        }
        let n = steps_per_log as f64;
        out.push(BenchSample {
            t: (j + 1) as f64 * cfg.log_period,
            rpm_ref,
            rpm: unit.state.rpm(),
            i_d: unit.state.i_d,
            i_q: unit.state.i_q,
            v_d: last.v_dq.x,
            v_q: last.v_dq.y,
            power: p_sum / n,
            thrust: t_sum / n,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerStats {
    pub power: f64,
    pub thrust: f64,
    pub rpm: f64,
    /// Standard deviation of the speed over the window.
    pub rpm_sd: f64,
    pub specific_thrust: f64,
}

/// Mean electrical power, thrust and specific thrust over `[t0, t1]`.
pub fn power_and_specific_thrust(trace: &[BenchSample], t0: f64, t1: f64) -> Result<PowerStats, PropulsionError> {
    let w: Vec<&BenchSample> = trace.iter().filter(|s| s.t >= t0 && s.t <= t1).collect();
    if w.is_empty() {
        return Err(PropulsionError::EmptyWindow);
    }
    let n = w.len() as f64;
    let rpm = w.iter().map(|s| s.rpm).sum::<f64>() / n;
    let sd = (w.iter().map(|s| (s.rpm - rpm).powi(2)).sum::<f64>() / n).sqrt();
    let power = w.iter().map(|s| s.power).sum::<f64>() / n;
    let thrust = w.iter().map(|s| s.thrust).sum::<f64>() / n;
    let specific_thrust = if thrust == 0.0 || power <= 0.0 { 0.0 } else { thrust / power };
    Ok(PowerStats {
        power,
        thrust,
        rpm,
        rpm_sd: sd,
        specific_thrust,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 10 to 90% rise time, s. `None` if 90% is never reached.
    pub rise_time: Option<f64>,
    /// Peak overshoot as a fraction of the step.
    pub overshoot: f64,
    /// Mean relative error over the last `tail` seconds.
    pub steady_error: f64,
    /// Relative speed standard deviation over the same tail.
    pub ripple: f64,
}

/// Step response metrics of a trace starting from rest at `t_step`.
pub fn step_metrics(trace: &[BenchSample], t_step: f64, target: f64, tail: f64) -> StepMetrics {
    let after: Vec<&BenchSample> = trace.iter().filter(|s| s.t >= t_step).collect();
    let cross = |frac: f64| after.iter().find(|s| s.rpm >= frac * target).map(|s| s.t);
    let rise_time = match (cross(0.1), cross(0.9)) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    };
    let peak = after.iter().map(|s| s.rpm).fold(f64::NEG_INFINITY, f64::max);
    let t_end = trace.last().map_or(0.0, |s| s.t);
    let w: Vec<f64> = after.iter().filter(|s| s.t > t_end - tail).map(|s| s.rpm).collect();
    let n = w.len().max(1) as f64;
    let mean = w.iter().sum::<f64>() / n;
    let sd = (w.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    StepMetrics {
        rise_time,
        overshoot: ((peak - target) / target).max(0.0),
        steady_error: (mean - target) / target,
        ripple: sd / target.abs(),
    }
}

/// Settling time of each constant-reference segment: time from the
/// reference change until the speed last enters `band` (relative) and
/// stays there to the end of the segment. `None` when it never settles.
pub fn segment_settle_times(trace: &[BenchSample], band: f64) -> Vec<Option<f64>> {
    let mut out = Vec::new();
    let mut start = 0;
    for k in 1..=trace.len() {
        if k < trace.len() && trace[k].rpm_ref == trace[start].rpm_ref {
            continue;
        }
        let seg = &trace[start..k];
        let r = seg[0].rpm_ref;
        let t0 = if start == 0 { 0.0 } else { trace[start - 1].t };
        let tol = band * r.abs();
        let settled = match seg.iter().rposition(|s| (s.rpm - r).abs() > tol) {
            None => Some(0.0),
            Some(i) if i + 1 < seg.len() => Some(seg[i].t - t0),
            Some(_) => None,
        };
        out.push(settled);
        start = k;
    }
    out
}

/// Per-setpoint statistics of a sweep, over the last 40% of each dwell.
pub fn sweep_stats(trace: &[BenchSample], rpms: &[f64], dwell: f64) -> Vec<Result<PowerStats, PropulsionError>> {
    (0..rpms.len())
        .map(|k| {
            let t1 = (k + 1) as f64 * dwell;
            power_and_specific_thrust(trace, t1 - 0.4 * dwell, t1)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PropulsionMode {
    /// Commanded thrust through a first-order lag.
    #[default]
    Ideal,
    /// Full FOC drive per rotor.
    Electrical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotorBankConfig {
    pub mode: PropulsionMode,
    pub tau_air: f64,
    pub tau_water: f64,
    pub bench: BenchConfig,
}

impl Default for RotorBankConfig {
    fn default() -> Self {
        Self {
            mode: PropulsionMode::Ideal,
            tau_air: 0.03,
            tau_water: 0.06,
            bench: BenchConfig::default(),
        }
    }
}

/// The four rotors of the vehicle.
#[derive(Debug, Clone)]
pub struct RotorBank {
    pub cfg: RotorBankConfig,
    load: PropellerLoad,
    thrust: [f64; 4],
    rpm: [f64; 4],
    power: [f64; 4],
    units: Vec<DriveUnit>,
}

impl RotorBank {
    pub fn new(cfg: RotorBankConfig, params: &VehicleParams, initial: &RotorCommand, water: f64) -> Self {
        let load = PropellerLoad::from_vehicle(params);
        let rpm = initial.0.map(|t| load.rpm_for_thrust(t, water));
        let units = match cfg.mode {
            PropulsionMode::Ideal => Vec::new(),
            PropulsionMode::Electrical => rpm
                .iter()
                .map(|r| {
                    let mut u = DriveUnit::new(
                        cfg.bench.motor.clone(),
                        Driver::new(DriverKind::Foc, &cfg.bench.foc, &cfg.bench.esc),
                        load,
                    );
                    u.settle_at(*r, water);
                    u
                })
                .collect(),
        };
        let power = rpm.map(|r| shaft_power(&load, r, water));
        Self {
            cfg,
            load,
            thrust: initial.0,
            rpm,
            power,
            units,
        }
    }

    pub fn thrust(&self) -> RotorCommand {
        RotorCommand(self.thrust)
    }

    pub fn rpm(&self) -> [f64; 4] {
        self.rpm
    }

    /// Total power: shaft power in ideal mode, electrical power otherwise.
    pub fn power(&self) -> f64 {
        self.power.iter().sum()
    }

    /// Advance by `dt` toward the commanded thrusts with `water` of each
    /// disc submerged.
    pub fn step(&mut self, cmd: &RotorCommand, water: f64, dt: f64) -> RotorCommand {
        match self.cfg.mode {
            PropulsionMode::Ideal => {
                let s = water.clamp(0.0, 1.0);
                let tau = (1.0 - s) * self.cfg.tau_air + s * self.cfg.tau_water;
                let a = 1.0 - (-dt / tau).exp();
                for j in 0..4 {
                    self.thrust[j] += (cmd.0[j] - self.thrust[j]) * a;
                    self.rpm[j] = self.load.rpm_for_thrust(self.thrust[j], water);
                    self.power[j] = shaft_power(&self.load, self.rpm[j], water);
                }
            }
            PropulsionMode::Electrical => {
                let h = self.cfg.bench.dt;
                let n = (dt / h).round().max(1.0) as usize;
                for j in 0..4 {
                    let rpm_ref = self.load.rpm_for_thrust(cmd.0[j], water);
                    let (mut tsum, mut psum) = (0.0, 0.0);
                    for _ in 0..n {
                        let o = self.units[j].step(rpm_ref, water, dt / n as f64);
                        tsum += o.thrust;
                        psum += o.power;
                    }
                    self.thrust[j] = tsum / n as f64;
                    self.power[j] = psum / n as f64;
                    self.rpm[j] = self.units[j].state.rpm();
                }
            }
        }
        RotorCommand(self.thrust)
    }
}

#[cfg(test)]
mod tests;
