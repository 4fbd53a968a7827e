//! Closed-form flat-output trajectories: figure-eight Lissajous curves,
//! trapezoidal lines, attitude sinusoids and multi-segment missions.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flatness::FlatPoint;
use crate::model::MotionMode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReferenceError {
    #[error("time {t} s outside trajectory [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
    #[error("invalid trajectory: {0}")]
    Invalid(String),
}

/// Position, yaw and ground pitch at a waypoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub pos: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub theta_t: f64,
}

/// Shape of one trajectory segment, in segment-local time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// 1:2 Lissajous figure eight around `center`. Give either
    /// `amplitude` and `period`, or `vmax` and `amax` to size the curve so
    /// both caps are reached exactly.
    Lissajous8 {
        center: [f64; 3],
        #[serde(default)]
        amplitude: Option<[f64; 2]>,
        #[serde(default)]
        period: Option<f64>,
        #[serde(default)]
        vmax: Option<f64>,
        #[serde(default)]
        amax: Option<f64>,
        #[serde(default = "one")]
        loops: f64,
        /// Phase-rate ramp at each end, s. Zero starts at full speed.
        #[serde(default)]
        ramp: f64,
        #[serde(default)]
        yaw: f64,
        #[serde(default)]
        theta_t: f64,
    },
    /// Straight line with a trapezoidal speed profile.
    Line {
        start: [f64; 3],
        heading: f64,
        length: f64,
        vmax: f64,
        amax: f64,
        #[serde(default)]
        theta_t: f64,
    },
    /// Pitch sinusoid `amplitude * sin(2 pi t / period)` with position held.
    /// The pitch command is carried in the `theta_t` channel.
    AttitudeSine {
        center: [f64; 3],
        amplitude_deg: f64,
        period: f64,
        duration: f64,
    },
    /// Rest-to-rest move with a seventh-order smoothstep.
    Move { from: Pose, to: Pose, duration: f64 },
    Hold { pose: Pose, duration: f64 },
}

fn one() -> f64 {
    1.0
}

/// Unknown keys are caught by the flattened shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub mode: MotionMode,
    #[serde(default = "one")]
    pub kappa: f64,
    /// Heading to hold while the planar speed is zero.
    #[serde(default)]
    pub hold_heading: Option<f64>,
    #[serde(flatten)]
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub segments: Vec<SegmentSpec>,
}

impl TrajectorySpec {
    pub fn single(mode: MotionMode, shape: Shape) -> Self {
        Self {
            segments: vec![SegmentSpec {
                mode,
                kappa: 1.0,
                hold_heading: None,
                shape,
            }],
        }
    }
}

/// Seventh-order smoothstep and its first four derivatives on `[0, 1]`.
pub fn smoothstep7(tau: f64) -> [f64; 5] {
    let t = tau.clamp(0.0, 1.0);
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    [
        t4 * (35.0 - 84.0 * t + 70.0 * t2 - 20.0 * t3),
        t3 * (140.0 - 420.0 * t + 420.0 * t2 - 140.0 * t3),
        t2 * (420.0 - 1680.0 * t + 2100.0 * t2 - 840.0 * t3),
        t * (840.0 - 5040.0 * t + 8400.0 * t2 - 4200.0 * t3),
        840.0 - 10080.0 * t + 25200.0 * t2 - 16800.0 * t3,
    ]
}

/// Integral of the smoothstep from 0 to `tau`.
fn smoothstep7_integral(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t.powi(5) * (7.0 - 14.0 * t + 10.0 * t * t - 2.5 * t.powi(3))
}

/// Peak of `|(sin s, 4 sin 2s)|` over `s`, the acceleration shape factor of
/// the 1:2 figure eight with `B = A / 2`.
pub fn lissajous_accel_factor() -> f64 {
    let f = |s: f64| (s.sin().powi(2) + 4.0 * (2.0 * s).sin().powi(2)).sqrt();
    let n = 4000;
    let mut best = (0.0, 0.0);
    for k in 0..=n {
        let s = PI * k as f64 / n as f64;
        let v = f(s);
        if v > best.1 {
            best = (s, v);
        }
    }
    let (mut lo, mut hi) = (best.0 - PI / n as f64, best.0 + PI / n as f64);
    for _ in 0..100 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) < f(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    f(0.5 * (lo + hi))
}

/// Amplitude `A` and angular rate `w` of `x = A sin(wt), y = A/2 sin(2wt)`
/// whose peak speed is `vmax` and peak acceleration is `amax`.
pub fn lissajous_for_caps(vmax: f64, amax: f64) -> (f64, f64) {
    let g = lissajous_accel_factor();
    let omega = amax * 2f64.sqrt() / (g * vmax);
    (vmax / (2f64.sqrt() * omega), omega)
}

/// Phase `phi(t)` and its first four derivatives for a constant rate
/// `omega` entered and left through smoothstep ramps.
fn warped_phase(t: f64, omega: f64, ramp: f64, total: f64) -> [f64; 5] {
    if ramp <= 0.0 {
        return [omega * t, omega, 0.0, 0.0, 0.0];
    }
    let ramp_at = |s: f64| {
        let tau = s / ramp;
        let sm = smoothstep7(tau);
        [
            omega * ramp * smoothstep7_integral(tau),
            omega * sm[0],
            omega * sm[1] / ramp,
            omega * sm[2] / (ramp * ramp),
            omega * sm[3] / (ramp * ramp * ramp),
        ]
    };
    if t <= ramp {
        ramp_at(t)
    } else if t >= total - ramp {
        let r = ramp_at(total - t);
        [omega * (total - ramp) - r[0], r[1], -r[2], r[3], -r[4]]
    } else {
        [omega * (0.5 * ramp + t - ramp), omega, 0.0, 0.0, 0.0]
    }
}

/// Lengthen a phase ramp until the ramped figure eight respects the
/// acceleration cap `amax` (the tangential term adds to the curvature term
/// while the phase rate builds up).
fn fit_ramp(amp: [f64; 2], omega: f64, ramp: f64, amax: f64) -> f64 {
    if ramp <= 0.0 {
        return ramp;
    }
    let peak = |r: f64| {
        let total = 2.0 * r + 1.0;
        (0..=2000)
            .map(|k| {
                let t = r * k as f64 / 2000.0;
                let phi = warped_phase(t, omega, r, total);
                let x = chain(sine_jet(amp[0], 1.0, phi[0]), phi);
                let y = chain(sine_jet(amp[1], 2.0, phi[0]), phi);
                x[2].hypot(y[2])
            })
            .fold(0.0, f64::max)
    };
    let mut r = ramp;
    while peak(r) > amax && r < 1e3 {
        r *= 1.05;
    }
    r
}

/// Derivatives of `f(phi(t))` given `f^(k)(phi)` and `phi^(k)(t)`.
fn chain(f: [f64; 5], p: [f64; 5]) -> [f64; 5] {
    let (p1, p2, p3, p4) = (p[1], p[2], p[3], p[4]);
    [
        f[0],
        f[1] * p1,
        f[2] * p1 * p1 + f[1] * p2,
        f[3] * p1.powi(3) + 3.0 * f[2] * p1 * p2 + f[1] * p3,
        f[4] * p1.powi(4)
            + 6.0 * f[3] * p1 * p1 * p2
            + f[2] * (3.0 * p2 * p2 + 4.0 * p1 * p3)
            + f[1] * p4,
    ]
}

/// `a sin(k phi)` and its derivatives in `phi`.
fn sine_jet(a: f64, k: f64, phi: f64) -> [f64; 5] {
    let (s, c) = (k * phi).sin_cos();
    [
        a * s,
        a * k * c,
        -a * k * k * s,
        -a * k.powi(3) * c,
        a * k.powi(4) * s,
    ]
}

#[derive(Debug, Clone, PartialEq)]
enum Curve {
    Lissajous {
        center: Vector3<f64>,
        amp: [f64; 2],
        omega: f64,
        ramp: f64,
        yaw: f64,
        theta: f64,
    },
    Line {
        start: Vector3<f64>,
        dir: Vector3<f64>,
        length: f64,
        vmax: f64,
        amax: f64,
        theta: f64,
    },
    Sine {
        center: Vector3<f64>,
        amplitude: f64,
        period: f64,
    },
    Move {
        from: Pose,
        to: Pose,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Segment {
    t0: f64,
    duration: f64,
    mode: MotionMode,
    kappa: f64,
    heading: f64,
    curve: Curve,
}

/// Trapezoidal (or triangular) profile: distance, speed, acceleration.
fn trapezoid(t: f64, length: f64, vmax: f64, amax: f64) -> ([f64; 3], f64) {
    let t_acc_full = vmax / amax;
    let (v_peak, t_acc) = if amax * t_acc_full * t_acc_full >= length {
        let ta = (length / amax).sqrt();
        (amax * ta, ta)
    } else {
        (vmax, t_acc_full)
    };
    let d_acc = 0.5 * amax * t_acc * t_acc;
    let t_cruise = (length - 2.0 * d_acc) / v_peak;
    let total = 2.0 * t_acc + t_cruise;
    let t = t.clamp(0.0, total);
    let out = if t < t_acc {
        [0.5 * amax * t * t, amax * t, amax]
    } else if t < t_acc + t_cruise {
        [d_acc + v_peak * (t - t_acc), v_peak, 0.0]
    } else {
        let r = total - t;
        [length - 0.5 * amax * r * r, amax * r, if r > 0.0 { -amax } else { 0.0 }]
    };
    (out, total)
}

impl Segment {
    fn sample(&self, t: f64) -> FlatPoint {
        let mut pt = FlatPoint::at_rest(Vector3::zeros(), self.mode);
        pt.t = self.t0 + t;
        pt.kappa = self.kappa;
        pt.heading_hint = self.heading;
        match &self.curve {
            Curve::Lissajous {
                center,
                amp,
                omega,
                ramp,
                yaw,
                theta,
            } => {
                let phi = warped_phase(t, *omega, *ramp, self.duration);
                let x = chain(sine_jet(amp[0], 1.0, phi[0]), phi);
                let y = chain(sine_jet(amp[1], 2.0, phi[0]), phi);
                for k in 0..5 {
                    pt.pos[k] = Vector3::new(x[k], y[k], 0.0);
                }
                pt.pos[0] += center;
                pt.yaw[0] = *yaw;
                pt.theta_t[0] = *theta;
            }
            Curve::Line {
                start,
                dir,
                length,
                vmax,
                amax,
                theta,
            } => {
                let (s, _) = trapezoid(t, *length, *vmax, *amax);
                pt.pos[0] = start + dir * s[0];
                pt.pos[1] = dir * s[1];
                pt.pos[2] = dir * s[2];
                pt.theta_t[0] = *theta;
            }
            Curve::Sine {
                center,
                amplitude,
                period,
            } => {
                pt.pos[0] = *center;
                let w = TAU / period;
                let (s, c) = (w * t).sin_cos();
                pt.theta_t = [amplitude * s, amplitude * w * c, -amplitude * w * w * s];
            }
            Curve::Move { from, to } => {
                let sm = smoothstep7(t / self.duration);
                let p0 = Vector3::from(from.pos);
                let dp = Vector3::from(to.pos) - p0;
                let dyaw = to.yaw - from.yaw;
                let dth = to.theta_t - from.theta_t;
                let mut scale = 1.0;
                for k in 0..5 {
                    pt.pos[k] = dp * sm[k] * scale;
                    if k < 3 {
                        pt.yaw[k] = dyaw * sm[k] * scale;
                        pt.theta_t[k] = dth * sm[k] * scale;
                    }
                    scale /= self.duration;
                }
                pt.pos[0] += p0;
                pt.yaw[0] += from.yaw;
                pt.theta_t[0] += from.theta_t;
            }
        }
        pt
    }
}

/// A compiled trajectory: a time-indexed list of segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    segments: Vec<Segment>,
    duration: f64,
}

fn positive(name: &str, v: f64) -> Result<f64, ReferenceError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ReferenceError::Invalid(format!("{name} must be positive, got {v}")))
    }
}

impl Trajectory {
    pub fn new(spec: &TrajectorySpec) -> Result<Self, ReferenceError> {
        if spec.segments.is_empty() {
            return Err(ReferenceError::Invalid("no segments".into()));
        }
        let mut segments = Vec::with_capacity(spec.segments.len());
        let mut t0 = 0.0;
        let mut last_heading = 0.0;
        for s in &spec.segments {
            if s.kappa != 1.0 && s.kappa != -1.0 {
                return Err(ReferenceError::Invalid(format!("kappa must be +-1, got {}", s.kappa)));
            }
            let (curve, duration, direction) = match &s.shape {
                Shape::Lissajous8 {
                    center,
                    amplitude,
                    period,
                    vmax,
                    amax,
                    loops,
                    ramp,
                    yaw,
                    theta_t,
                } => {
                    let (amp, omega) = match (amplitude, period, vmax, amax) {
                        (_, _, Some(v), Some(a)) => {
                            let (a_x, w) =
                                lissajous_for_caps(positive("vmax", *v)?, positive("amax", *a)?);
                            ([a_x, 0.5 * a_x], w)
                        }
                        (Some(a), Some(p), None, None) => (*a, TAU / positive("period", *p)?),
                        _ => {
                            return Err(ReferenceError::Invalid(
                                "lissajous8 needs amplitude+period or vmax+amax".into(),
                            ))
                        }
                    };
                    let mut ramp = ramp.max(0.0);
                    if let (Some(_), Some(a)) = (vmax, amax) {
                        ramp = fit_ramp(amp, omega, ramp, *a);
                    }
                    let duration = positive("loops", *loops)? * TAU / omega + ramp;
                    let dir = (amp[0], 2.0 * amp[1]);
                    (
                        Curve::Lissajous {
                            center: Vector3::from(*center),
                            amp,
                            omega,
                            ramp,
                            yaw: *yaw,
                            theta: *theta_t,
                        },
                        duration,
                        Some(dir),
                    )
                }
                Shape::Line {
                    start,
                    heading,
                    length,
                    vmax,
                    amax,
                    theta_t,
                } => {
                    let dir = Vector3::new(heading.cos(), heading.sin(), 0.0);
                    let (_, total) = trapezoid(
                        0.0,
                        positive("length", *length)?,
                        positive("vmax", *vmax)?,
                        positive("amax", *amax)?,
                    );
                    (
                        Curve::Line {
                            start: Vector3::from(*start),
                            dir,
                            length: *length,
                            vmax: *vmax,
                            amax: *amax,
                            theta: *theta_t,
                        },
                        total,
                        Some((dir.x, dir.y)),
                    )
                }
                Shape::AttitudeSine {
                    center,
                    amplitude_deg,
                    period,
                    duration,
                } => (
                    Curve::Sine {
                        center: Vector3::from(*center),
                        amplitude: amplitude_deg.to_radians(),
                        period: positive("period", *period)?,
                    },
                    positive("duration", *duration)?,
                    None,
                ),
                Shape::Move { from, to, duration } => {
                    let d = (to.pos[0] - from.pos[0], to.pos[1] - from.pos[1]);
                    let planar = (d.0 * d.0 + d.1 * d.1).sqrt() > 0.0;
                    (
                        Curve::Move {
                            from: *from,
                            to: *to,
                        },
                        positive("duration", *duration)?,
                        if planar { Some(d) } else { None },
                    )
                }
                Shape::Hold { pose, duration } => (
                    Curve::Move {
                        from: *pose,
                        to: *pose,
                    },
                    positive("duration", *duration)?,
                    None,
                ),
            };
            let heading = match (s.hold_heading, direction) {
                (Some(h), _) => h,
                (None, Some((dx, dy))) if s.mode.is_ground() => (s.kappa * dy).atan2(s.kappa * dx),
                _ => last_heading,
            };
            last_heading = heading;
            segments.push(Segment {
                t0,
                duration,
                mode: s.mode,
                kappa: s.kappa,
                heading,
                curve,
            });
            t0 += duration;
        }
        Ok(Self {
            segments,
            duration: t0,
        })
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    fn segment_at(&self, t: f64) -> &Segment {
        let idx = self
            .segments
            .partition_point(|s| s.t0 <= t)
            .saturating_sub(1);
        &self.segments[idx]
    }

    /// Flat output at time `t`.
    pub fn sample(&self, t: f64) -> Result<FlatPoint, ReferenceError> {
        if !(0.0..=self.duration + 1e-9).contains(&t) {
            return Err(ReferenceError::OutOfRange {
                t,
                duration: self.duration,
            });
        }
        Ok(self.sample_clamped(t))
    }

    /// Like [`Trajectory::sample`] but holds the end points outside the
    /// time range (used for prediction horizons running past the end).
    pub fn sample_clamped(&self, t: f64) -> FlatPoint {
        let tc = t.clamp(0.0, self.duration);
        let seg = self.segment_at(tc);
        let mut pt = seg.sample((tc - seg.t0).min(seg.duration));
        if t != tc {
            for k in 1..5 {
                pt.pos[k] = Vector3::zeros();
            }
            pt.yaw[1..].fill(0.0);
            pt.theta_t[1..].fill(0.0);
        }
        pt.t = t;
        pt
    }

    pub fn mode_at(&self, t: f64) -> MotionMode {
        self.segment_at(t.clamp(0.0, self.duration)).mode
    }

    /// `(start time, mode)` of every segment.
    pub fn mode_schedule(&self) -> Vec<(f64, MotionMode)> {
        self.segments.iter().map(|s| (s.t0, s.mode)).collect()
    }
}

/// The air-land demonstration: drive forward, pitch the thrust axis up,
/// take off, fly a figure eight, land, pitch back down and reverse to the
/// start.
pub fn air_land_mission(contact_height: f64) -> TrajectorySpec {
    let h = contact_height;
    let up = (-85f64).to_radians();
    let drive = 2.5;
    let fly = 1.0;
    let seg = |mode, kappa, shape| SegmentSpec {
        mode,
        kappa,
        hold_heading: Some(0.0),
        shape,
    };
    let pose = |x: f64, z: f64, th: f64| Pose {
        pos: [x, 0.0, z],
        yaw: 0.0,
        theta_t: th,
    };
    TrajectorySpec {
        segments: vec![
            seg(MotionMode::GroundLand, 1.0, Shape::Hold { pose: pose(0.0, h, 0.0), duration: 1.0 }),
            seg(
                MotionMode::GroundLand,
                1.0,
                Shape::Move { from: pose(0.0, h, 0.0), to: pose(drive, h, 0.0), duration: 3.0 },
            ),
            seg(
                MotionMode::GroundLand,
                1.0,
                Shape::Move { from: pose(drive, h, 0.0), to: pose(drive, h, up), duration: 2.0 },
            ),
            seg(
                MotionMode::FlightAir,
                1.0,
                Shape::Move { from: pose(drive, h, 0.0), to: pose(drive, fly, 0.0), duration: 2.5 },
            ),
            seg(
                MotionMode::FlightAir,
                1.0,
                Shape::Lissajous8 {
                    center: [drive, 0.0, fly],
                    amplitude: None,
                    period: None,
                    vmax: Some(2.0),
                    amax: Some(2.0),
                    loops: 1.0,
                    ramp: 2.0,
                    yaw: 0.0,
                    theta_t: 0.0,
                },
            ),
            seg(
                MotionMode::FlightAir,
                1.0,
                Shape::Move { from: pose(drive, fly, 0.0), to: pose(drive, h, 0.0), duration: 3.0 },
            ),
            seg(
                MotionMode::GroundLand,
                1.0,
                Shape::Move { from: pose(drive, h, up), to: pose(drive, h, 0.0), duration: 2.0 },
            ),
            seg(
                MotionMode::GroundLand,
                -1.0,
                Shape::Move { from: pose(drive, h, 0.0), to: pose(0.0, h, 0.0), duration: 3.0 },
            ),
            seg(MotionMode::GroundLand, 1.0, Shape::Hold { pose: pose(0.0, h, 0.0), duration: 1.0 }),
        ],
    }
}
