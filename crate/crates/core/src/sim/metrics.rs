//! Tracking and timing metrics over logged signals, and the kinematic
//! obstacle clearance check.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty signal")]
    Empty,
}

/// Which RMSE formula to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseForm {
    /// `sqrt(mean(|e|^2))`.
    #[default]
    Squared,
    /// `sqrt(mean(|e|))`, the formula with the square left out.
    AsPrinted,
}

pub fn rmse(p: &[Vector3<f64>], p_ref: &[Vector3<f64>], form: RmseForm) -> Result<f64, MetricError> {
    if p.len() != p_ref.len() {
        return Err(MetricError::LengthMismatch(p.len(), p_ref.len()));
    }
    if p.is_empty() {
        return Err(MetricError::Empty);
    }
    let sum: f64 = p
        .iter()
        .zip(p_ref)
        .map(|(a, b)| {
            let e = (a - b).norm();
            match form {
                RmseForm::Squared => e * e,
                RmseForm::AsPrinted => e,
            }
        })
        .sum();
    Ok((sum / p.len() as f64).sqrt())
}

/// `(min, max)` of a signal.
pub fn range(x: &[f64]) -> Result<(f64, f64), MetricError> {
    if x.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
}

pub fn max_abs_error(y: &[f64], r: &[f64]) -> Result<f64, MetricError> {
    if y.len() != r.len() {
        return Err(MetricError::LengthMismatch(y.len(), r.len()));
    }
    y.iter().zip(r).map(|(a, b)| (a - b).abs()).reduce(f64::max).ok_or(MetricError::Empty)
}

/// 10 to 90% rise time of `y` toward `target` from `y[0]`. `None` if the
/// 90% level is never reached.
pub fn rise_time(t: &[f64], y: &[f64], target: f64) -> Option<f64> {
    let y0 = *y.first()?;
    let level = |f: f64| y0 + f * (target - y0);
    let sign = (target - y0).signum();
    let cross = |f: f64| {
        let l = level(f);
        y.iter().position(|v| (v - l) * sign >= 0.0).map(|i| t[i])
    };
    Some(cross(0.9)? - cross(0.1)?)
}

/// Delay of `y` behind `r` maximizing their cross-correlation, searched
/// over `0..=max_lag` seconds on uniform samples `dt` apart.
pub fn phase_lag(r: &[f64], y: &[f64], dt: f64, max_lag: f64) -> Result<f64, MetricError> {
    if r.len() != y.len() {
        return Err(MetricError::LengthMismatch(r.len(), y.len()));
    }
    let n = r.len();
    let max_shift = ((max_lag / dt).round() as usize).min(n.saturating_sub(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (mr, my) = (mean(r), mean(y));
    let mut best = (f64::NEG_INFINITY, 0usize);
    for s in 0..=max_shift {
        let m = n - s;
        let c: f64 = (0..m).map(|k| (r[k] - mr) * (y[k + s] - my)).sum::<f64>() / m as f64;
        if c > best.0 {
            best = (c, s);
        }
    }
    if best.0 == f64::NEG_INFINITY {
        return Err(MetricError::Empty);
    }
    Ok(best.1 as f64 * dt)
}

/// Time from the first event matching `from` to the first later event
/// matching `to`.
pub fn event_delta<'a>(events: impl IntoIterator<Item = (f64, &'a str)>, from: &str, to: &str) -> Option<f64> {
    let mut start = None;
    for (t, name) in events {
        match start {
            None if name == from => start = Some(t),
            Some(t0) if name == to => return Some(t - t0),
            _ => {}
        }
    }
    None
}

/// Box obstacle on flat ground, crossed along the world `x` axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    /// Center of the obstacle along `x`, m.
    pub x: f64,
    /// Extent along `x`, m.
    pub length: f64,
    pub height: f64,
}

impl Obstacle {
    pub fn spans(&self, x: f64) -> bool {
        (x - self.x).abs() <= 0.5 * self.length
    }
}

/// Chord model of the underbody: 2 cm of clearance with the thrust axis
/// horizontal, rising with `sin |theta_T|` as the body pitches up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClearanceModel {
    pub base: f64,
    pub gain: f64,
}

impl Default for ClearanceModel {
    fn default() -> Self {
        Self { base: 0.02, gain: 0.09 }
    }
}

impl ClearanceModel {
    pub fn base_clearance(&self, theta_t: f64) -> f64 {
        self.base + self.gain * theta_t.abs().min(std::f64::consts::FRAC_PI_2).sin()
    }

    /// Smallest `|theta_T|` whose clearance reaches `height`, if any.
    pub fn pitch_for(&self, height: f64) -> Option<f64> {
        let s = (height - self.base) / self.gain;
        if s <= 0.0 {
            Some(0.0)
        } else if s <= 1.0 {
            Some(s.asin())
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clearance {
    pub pass: bool,
    /// Geometric clearance over the obstacle, m. Negative on collision.
    pub margin: f64,
}

/// Clearance of a grounded vehicle at `x` with pitch `theta_t`.
pub fn clearance_check(model: &ClearanceModel, x: f64, theta_t: f64, obstacle: Option<&Obstacle>) -> Clearance {
    let base = model.base_clearance(theta_t);
    let h = obstacle.filter(|o| o.spans(x)).map_or(0.0, |o| o.height);
    let margin = base - h;
    Clearance { pass: margin >= 0.0, margin }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(x: f64) -> Vector3<f64> {
        Vector3::new(x, 0.0, 0.0)
    }

    #[test]
    fn rmse_examples() {
        let a: Vec<_> = (0..10).map(|k| v(k as f64)).collect();
        assert_eq!(rmse(&a, &a, RmseForm::Squared).unwrap(), 0.0);
        let b: Vec<_> = a.iter().map(|p| p + v(0.1)).collect();
        assert_abs_diff_eq!(rmse(&b, &a, RmseForm::Squared).unwrap(), 0.1, epsilon = 1e-12);
        let c: Vec<_> = (0..10).map(|k| if k % 2 == 0 { v(0.0) } else { v(0.2) }).collect();
        let zero = vec![v(0.0); 10];
        assert_abs_diff_eq!(rmse(&c, &zero, RmseForm::Squared).unwrap(), 0.02f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(rmse(&c, &zero, RmseForm::AsPrinted).unwrap(), 0.1f64.sqrt(), epsilon = 1e-12);
        assert!(matches!(rmse(&a[..3], &a, RmseForm::Squared), Err(MetricError::LengthMismatch(3, 10))));
    }

    #[test]
    fn pitch_range_of_constant_is_zero() {
        let (lo, hi) = range(&[0.3; 50]).unwrap();
        assert_eq!(hi - lo, 0.0);
    }

    #[test]
    fn phase_lag_of_shifted_sine() {
        let dt = 0.005;
        let t: Vec<f64> = (0..2000).map(|k| k as f64 * dt).collect();
        let r: Vec<f64> = t.iter().map(|t| (std::f64::consts::TAU * t).sin()).collect();
        let y: Vec<f64> = t.iter().map(|t| (std::f64::consts::TAU * (t - 0.1)).sin()).collect();
        let lag = phase_lag(&r, &y, dt, 0.5).unwrap();
        assert!((lag - 0.1).abs() <= dt + 1e-12, "{lag}");
    }

    #[test]
    fn rise_time_of_ramp() {
        let t: Vec<f64> = (0..=200).map(|k| k as f64 * 0.01).collect();
        let y: Vec<f64> = t.iter().map(|t| t.min(1.0)).collect();
        assert_abs_diff_eq!(rise_time(&t, &y, 1.0).unwrap(), 0.8, epsilon = 1e-9);
        assert!(rise_time(&t, &y, 2.0).is_none());
    }

    #[test]
    fn event_deltas() {
        let ev = [(0.0, "engage"), (1.2, "detach"), (1.5, "handoff")];
        assert_abs_diff_eq!(event_delta(ev, "engage", "detach").unwrap(), 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(event_delta(ev, "engage", "handoff").unwrap(), 1.5, epsilon = 1e-12);
        assert!(event_delta(ev, "handoff", "engage").is_none());
    }

    #[test]
    fn clearance_examples() {
        let m = ClearanceModel::default();
        let o = Obstacle { x: 1.0, length: 0.1, height: 0.09 };
        assert!(!clearance_check(&m, 1.0, 0.0, Some(&o)).pass);
        let free = clearance_check(&m, 1.0, 0.0, None);
        assert!(free.pass);
        assert_abs_diff_eq!(free.margin, 0.02, epsilon = 1e-15);
        let th = m.pitch_for(0.09).unwrap();
        assert_abs_diff_eq!(th.sin(), 7.0 / 9.0, epsilon = 1e-12);
        assert!(clearance_check(&m, 1.0, -(th + 0.01), Some(&o)).pass);
        assert!(!clearance_check(&m, 1.0, -(th - 0.01), Some(&o)).pass);
        assert!(clearance_check(&m, 2.0, 0.0, Some(&o)).pass);
        assert!(m.pitch_for(0.2).is_none());
    }

    proptest! {
        #[test]
        fn rmse_is_translation_invariant(off in -5.0..5.0f64, e in 0.0..1.0f64) {
            let a: Vec<_> = (0..20).map(|k| v(k as f64 * e)).collect();
            let b: Vec<_> = (0..20).map(|k| v(k as f64)).collect();
            let sa: Vec<_> = a.iter().map(|p| p + v(off)).collect();
            let sb: Vec<_> = b.iter().map(|p| p + v(off)).collect();
            let r0 = rmse(&a, &b, RmseForm::Squared).unwrap();
            let r1 = rmse(&sa, &sb, RmseForm::Squared).unwrap();
            prop_assert!((r0 - r1).abs() < 1e-9 * r0.max(1.0));
        }
    }
}
