//! Scenario files: `[vehicle]`, `[trajectory]`, `[controller]`,
//! `[environment]`, `[run]` and optional `[acceptance]` thresholds.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::integrate::{SimError, World};
use super::metrics::{ClearanceModel, Obstacle, RmseForm};
use super::observer::ObserverConfig;
use crate::hnmpc::OcpConfig;
use crate::model::VehicleParams;
use crate::pid::{PidGains, WaterExitConfig};
use crate::propulsion::RotorBankConfig;
use crate::reference::{air_land_mission, SegmentSpec, TrajectorySpec};
use crate::supervisor::{Controller, SupervisorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    AirLandMission,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub preset: Option<Preset>,
    pub segments: Vec<SegmentSpec>,
}

impl TrajectoryConfig {
    pub fn spec(&self, params: &VehicleParams) -> Result<TrajectorySpec, SimError> {
        match (self.preset, self.segments.is_empty()) {
            (Some(Preset::AirLandMission), true) => Ok(air_land_mission(params.contact_height)),
            (None, false) => Ok(TrajectorySpec {
                segments: self.segments.clone(),
            }),
            (Some(_), false) => Err(SimError::Scenario("give either a preset or segments, not both".into())),
            (None, true) => Err(SimError::Scenario("trajectory has no segments".into())),
        }
    }
}

/// Single-loop attitude PID with depth hold, used in water.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnderwaterConfig {
    pub angle: PidGains,
    pub depth_kp: f64,
    pub depth_kd: f64,
}

impl Default for UnderwaterConfig {
    fn default() -> Self {
        Self {
            angle: PidGains::underwater_angle(),
            depth_kp: 20.0,
            depth_kd: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Controller active at `t = 0`; the mode default when unset.
    pub initial: Option<Controller>,
    pub hnmpc: OcpConfig,
    pub supervisor: SupervisorConfig,
    pub water_exit: WaterExitConfig,
    pub underwater: UnderwaterConfig,
    pub propulsion: RotorBankConfig,
    /// Cancel an estimated external body torque on top of the NMPC command.
    pub torque_observer: Option<ObserverConfig>,
    /// Control-tick compute budget, s.
    pub deadline: f64,
    /// Move the reference onto the vehicle when the water-exit PID hands
    /// off to the NMPC.
    pub reanchor_on_handoff: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            initial: None,
            hnmpc: OcpConfig::default(),
            supervisor: SupervisorConfig::default(),
            water_exit: WaterExitConfig::default(),
            underwater: UnderwaterConfig::default(),
            propulsion: RotorBankConfig::default(),
            torque_observer: None,
            deadline: 0.005,
            reanchor_on_handoff: true,
        }
    }
}

/// Periodic external torque pulses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseTrain {
    /// Torque in the mass frame in flight, the geometric frame on the
    /// ground, N m.
    pub torque: [f64; 3],
    pub start: f64,
    pub period: f64,
    pub width: f64,
    /// Flip the sign of every other pulse.
    #[serde(default)]
    pub alternate: bool,
}

impl PulseTrain {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        if t < self.start || self.period <= 0.0 {
            return Vector3::zeros();
        }
        let k = ((t - self.start) / self.period).floor();
        if t - self.start - k * self.period >= self.width {
            return Vector3::zeros();
        }
        let sign = if self.alternate && (k as i64) % 2 == 1 { -1.0 } else { 1.0 };
        Vector3::from(self.torque) * sign
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub ground_height: f64,
    pub water_level: Option<f64>,
    pub hull_height: f64,
    pub obstacles: Vec<Obstacle>,
    pub clearance: ClearanceModel,
    pub disturbance: Option<PulseTrain>,
    /// Standard deviation of the position measurement noise, m.
    pub position_noise: f64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        let w = World::default();
        Self {
            ground_height: w.ground_height,
            water_level: w.water_level,
            hull_height: w.hull_height,
            obstacles: Vec::new(),
            clearance: ClearanceModel::default(),
            disturbance: None,
            position_noise: 0.0,
        }
    }
}

impl EnvironmentConfig {
    pub fn world(&self) -> World {
        World {
            ground_height: self.ground_height,
            water_level: self.water_level,
            hull_height: self.hull_height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// The reference state at `t = 0`, at rest when the mode has no
    /// flatness map.
    FromReference,
    /// Floating at the water surface with all rotors at `rpm`.
    Floating { x: f64, y: f64, rpm: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub duration: f64,
    pub physics_dt: f64,
    pub control_period: f64,
    pub seed: u64,
    pub initial: InitialState,
    /// Hand over to the water-exit PID at this time.
    pub engage_exit_at: Option<f64>,
    /// Arm the supervisor for the next submersion at this time.
    pub dive_at: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            physics_dt: 1e-3,
            control_period: 5e-3,
            seed: 1,
            initial: InitialState::FromReference,
            engage_exit_at: None,
            dive_at: None,
        }
    }
}

/// Thresholds a scenario declares for itself. Unset entries are not
/// checked.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Acceptance {
    pub rmse_form: RmseForm,
    /// Only rows with `t` in this window enter the metrics.
    pub window: Option<[f64; 2]>,
    pub rmse_max: Option<f64>,
    /// Ground pitch envelope, degrees.
    pub theta_t_range_deg: Option<[f64; 2]>,
    pub mode_events: Option<usize>,
    /// Smallest allowed time between two mode events, s.
    pub min_event_spacing: Option<f64>,
    pub pitch_error_max_deg: Option<f64>,
    pub pitch_lag_max: Option<f64>,
    /// From the water-exit engagement to leaving the surface, s.
    pub detach_max: Option<f64>,
    /// From the water-exit engagement to the hand-off to HNMPC, s.
    pub handoff_max: Option<f64>,
    pub post_handoff_attitude_deg: Option<f64>,
    /// Expected outcome of the obstacle crossing.
    pub clears_obstacles: Option<bool>,
    /// Ceiling on the mean power as a fraction of the hover power.
    pub power_ratio_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub vehicle: VehicleParams,
    pub trajectory: TrajectoryConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub acceptance: Acceptance,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        self.vehicle.validate().map_err(|e| SimError::Scenario(e.to_string()))?;
        self.controller.hnmpc.validate().map_err(|e| SimError::Scenario(e.to_string()))?;
        let r = &self.run;
        if !(r.duration > 0.0 && r.physics_dt > 0.0 && r.control_period > 0.0) {
            return bad("duration and steps must be positive".into());
        }
        let ratio = r.control_period / r.physics_dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return bad(format!("control period must be a whole number of physics steps, got {ratio}"));
        }
        if matches!(r.initial, InitialState::Floating { .. }) && self.environment.water_level.is_none() {
            return bad("floating start needs a water level".into());
        }
        if self.environment.position_noise < 0.0 {
            return bad("position noise must be non-negative".into());
        }
        self.trajectory.spec(&self.vehicle)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[trajectory]
[[trajectory.segments]]
mode = "flight_air"
kind = "hold"
duration = 2.0
pose = { pos = [0.0, 0.0, 1.0] }

[run]
duration = 2.0
"#;

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let s = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(s.run.physics_dt, 1e-3);
        assert_eq!(s.run.control_period, 5e-3);
        assert_eq!(s.vehicle, VehicleParams::default());
        assert_eq!(s.trajectory.segments.len(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nbogus = 1\n");
        assert!(Scenario::from_toml(&text).is_err());
    }

    #[test]
    fn bad_rates_are_rejected() {
        let text = MINIMAL.replace("[run]\nduration = 2.0", "[run]\nduration = 2.0\ncontrol_period = 0.0025");
        assert!(Scenario::from_toml(&text).is_err());
        let text = MINIMAL.replace("[run]\nduration = 2.0", "[run]\nduration = -1.0");
        assert!(Scenario::from_toml(&text).is_err());
    }

    #[test]
    fn pulse_train() {
        let p = PulseTrain {
            torque: [0.0, 0.05, 0.0],
            start: 1.0,
            period: 1.0,
            width: 0.2,
            alternate: true,
        };
        assert_eq!(p.at(0.5), Vector3::zeros());
        assert_eq!(p.at(1.1).y, 0.05);
        assert_eq!(p.at(1.3).y, 0.0);
        assert_eq!(p.at(2.1).y, -0.05);
    }
}
