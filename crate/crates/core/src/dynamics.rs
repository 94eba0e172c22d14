//! Car-following acceleration laws.
//!
//! Human-driven vehicles follow the intelligent driver model (IDM); automated
//! vehicles follow the optimal velocity with relative velocity model (OVRV).
//! Both are functions of the spacing `s` to the vehicle ahead, the relative
//! speed `dv = v_prev - v` and the vehicle's own speed `v`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Local traffic state seen by one follower.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarFollowingInput {
    /// Bumper-to-bumper gap to the preceding vehicle, m.
    pub spacing: f64,
    /// `v_prev - v`, m/s.
    pub relative_speed: f64,
    /// Own speed, m/s.
    pub speed: f64,
}

impl CarFollowingInput {
    pub fn new(spacing: f64, relative_speed: f64, speed: f64) -> Self {
        Self {
            spacing,
            relative_speed,
            speed,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        ensure_finite("spacing", self.spacing)?;
        ensure_finite("relative speed", self.relative_speed)?;
        ensure_finite("speed", self.speed)?;
        if self.spacing <= 0.0 {
            return Err(Error::Domain(format!(
                "spacing must be positive, got {}",
                self.spacing
            )));
        }
        if self.speed < 0.0 {
            return Err(Error::Domain(format!(
                "speed must be non-negative, got {}",
                self.speed
            )));
        }
        Ok(())
    }
}

/// Intelligent driver model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    /// Maximum acceleration, m/s².
    pub a: f64,
    /// Comfortable deceleration, m/s².
    pub b: f64,
    /// Free-flow speed, m/s.
    pub v0: f64,
    /// Jam spacing, m.
    pub s0: f64,
    /// Safe time headway, s.
    #[serde(rename = "T")]
    pub time_headway: f64,
    pub delta: f64,
    /// Vehicle length, m.
    pub length: f64,
}

impl IdmParams {
    /// Low-oscillation human driver set.
    pub const SCENARIO_I: IdmParams = IdmParams {
        a: 0.6,
        b: 2.5,
        v0: 35.0,
        s0: 2.0,
        time_headway: 1.5,
        delta: 4.0,
        length: 5.0,
    };

    /// Highly unstable human driver set calibrated on field experiments.
    pub const SCENARIO_II: IdmParams = IdmParams {
        a: 0.6,
        b: 5.2,
        v0: 44.1,
        s0: 6.3,
        time_headway: 2.2,
        delta: 15.5,
        length: 5.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("idm.a", self.a),
            ("idm.b", self.b),
            ("idm.v0", self.v0),
            ("idm.s0", self.s0),
            ("idm.T", self.time_headway),
            ("idm.delta", self.delta),
            ("idm.length", self.length),
        ] {
            ensure_finite(name, value)?;
            if value <= 0.0 {
                return Err(Error::Domain(format!("{name} must be positive, got {value}")));
            }
        }
        Ok(())
    }

    /// Desired dynamic spacing `s*(v, dv)` with the `max{0, .}` clamp.
    pub fn desired_spacing(&self, speed: f64, relative_speed: f64) -> f64 {
        let dynamic = speed * self.time_headway
            - speed * relative_speed / (2.0 * (self.a * self.b).sqrt());
        self.s0 + dynamic.max(0.0)
    }
}

/// Optimal velocity with relative velocity parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OvrvParams {
    /// Spacing gain, 1/s².
    pub k1: f64,
    /// Relative speed gain, 1/s.
    pub k2: f64,
    /// Standstill spacing, m.
    pub eta: f64,
    /// Desired time gap, s.
    pub tau: f64,
    /// Vehicle length, m.
    pub length: f64,
}

impl OvrvParams {
    pub const DEFAULT: OvrvParams = OvrvParams {
        k1: 0.02,
        k2: 0.13,
        eta: 21.51,
        tau: 1.71,
        length: 5.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("ovrv.k1", self.k1),
            ("ovrv.k2", self.k2),
            ("ovrv.eta", self.eta),
            ("ovrv.tau", self.tau),
            ("ovrv.length", self.length),
        ] {
            ensure_finite(name, value)?;
        }
        if self.k1 <= 0.0 || self.k2 <= 0.0 || self.tau <= 0.0 {
            return Err(Error::Domain(
                "ovrv k1, k2 and tau must be positive".to_string(),
            ));
        }
        if self.eta < 0.0 {
            return Err(Error::Domain("ovrv eta must be non-negative".to_string()));
        }
        if self.length <= 0.0 {
            return Err(Error::Domain("ovrv length must be positive".to_string()));
        }
        Ok(())
    }
}

/// IDM acceleration. Not floored at `-b`.
pub fn idm_accel(input: CarFollowingInput, p: &IdmParams) -> Result<f64> {
    input.validate()?;
    Ok(idm_accel_unchecked(input, p))
}

#[inline]
pub(crate) fn idm_accel_unchecked(input: CarFollowingInput, p: &IdmParams) -> f64 {
    let s_star = p.desired_spacing(input.speed, input.relative_speed);
    let free = (input.speed / p.v0).powf(p.delta);
    let interaction = s_star / input.spacing;
    p.a * (1.0 - free - interaction * interaction)
}

/// OVRV acceleration `k1 (s - eta - tau v) + k2 dv`.
pub fn ovrv_accel(input: CarFollowingInput, p: &OvrvParams) -> Result<f64> {
    ensure_finite("spacing", input.spacing)?;
    ensure_finite("relative speed", input.relative_speed)?;
    ensure_finite("speed", input.speed)?;
    Ok(ovrv_accel_unchecked(input, p))
}

#[inline]
pub(crate) fn ovrv_accel_unchecked(input: CarFollowingInput, p: &OvrvParams) -> f64 {
    p.k1 * (input.spacing - p.eta - p.tau * input.speed) + p.k2 * input.relative_speed
}

/// Partial derivatives of an acceleration law with respect to `(s, dv, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelPartials {
    pub d_spacing: f64,
    pub d_relative_speed: f64,
    pub d_speed: f64,
}

/// Which car-following law a vehicle obeys.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    Idm(IdmParams),
    Ovrv(OvrvParams),
}

impl ModelKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelKind::Idm(p) => p.validate(),
            ModelKind::Ovrv(p) => p.validate(),
        }
    }

    pub fn length(&self) -> f64 {
        match self {
            ModelKind::Idm(p) => p.length,
            ModelKind::Ovrv(p) => p.length,
        }
    }

    pub fn accel(&self, input: CarFollowingInput) -> Result<f64> {
        match self {
            ModelKind::Idm(p) => idm_accel(input, p),
            ModelKind::Ovrv(p) => ovrv_accel(input, p),
        }
    }

    /// Analytic partials. At the IDM `max{0, .}` kink the inactive branch is used.
    pub fn partials(&self, input: CarFollowingInput) -> AccelPartials {
        match self {
            ModelKind::Ovrv(p) => AccelPartials {
                d_spacing: p.k1,
                d_relative_speed: p.k2,
                d_speed: -p.k1 * p.tau,
            },
            ModelKind::Idm(p) => {
                let CarFollowingInput {
                    spacing: s,
                    relative_speed: dv,
                    speed: v,
                } = input;
                let root_ab = 2.0 * (p.a * p.b).sqrt();
                let s_star = p.desired_spacing(v, dv);
                let active = v * p.time_headway - v * dv / root_ab > 0.0;
                let (ds_dv, ds_ddv) = if active {
                    (p.time_headway - dv / root_ab, -v / root_ab)
                } else {
                    (0.0, 0.0)
                };
                let free = if v > 0.0 {
                    p.delta * v.powf(p.delta - 1.0) / p.v0.powf(p.delta)
                } else {
                    0.0
                };
                AccelPartials {
                    d_spacing: 2.0 * p.a * s_star * s_star / (s * s * s),
                    d_relative_speed: -2.0 * p.a * s_star / (s * s) * ds_ddv,
                    d_speed: -p.a * free - 2.0 * p.a * s_star / (s * s) * ds_dv,
                }
            }
        }
    }
}

/// Spacing at which a vehicle cruising at `speed` behind an equal-speed
/// predecessor has zero acceleration.
pub fn equilibrium_spacing(model: &ModelKind, speed: f64) -> Result<f64> {
    ensure_finite("speed", speed)?;
    if speed < 0.0 {
        return Err(Error::Domain(format!("speed must be non-negative, got {speed}")));
    }
    match model {
        ModelKind::Ovrv(p) => Ok(p.eta + p.tau * speed),
        ModelKind::Idm(p) => {
            if speed >= p.v0 {
                return Err(Error::NoEquilibrium {
                    speed,
                    free_speed: p.v0,
                });
            }
            let ratio = (speed / p.v0).powf(p.delta);
            let closed = (p.s0 + speed * p.time_headway) / (1.0 - ratio).sqrt();
            let residual = idm_accel_unchecked(CarFollowingInput::new(closed, 0.0, speed), p);
            if closed.is_finite() && residual.abs() <= 1e-9 {
                Ok(closed)
            } else {
                idm_equilibrium_bisection(p, speed)
            }
        }
    }
}

/// Bisection on `s` for `idm_accel(s, 0, v) = 0`. The acceleration is
/// increasing in `s`, negative at `s0` and positive for large `s`.
pub fn idm_equilibrium_bisection(p: &IdmParams, speed: f64) -> Result<f64> {
    if speed >= p.v0 {
        return Err(Error::NoEquilibrium {
            speed,
            free_speed: p.v0,
        });
    }
    let f = |s: f64| idm_accel_unchecked(CarFollowingInput::new(s, 0.0, speed), p);
    let mut lo = p.s0 * 0.5;
    let mut hi = (p.s0 + speed * p.time_headway).max(1.0);
    while f(hi) < 0.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::NoEquilibrium {
                speed,
                free_speed: p.v0,
            });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Uniform grid over a closed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n }
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.n.max(1);
        (0..n).map(move |k| {
            if n == 1 {
                self.lo
            } else {
                self.lo + (self.hi - self.lo) * k as f64 / (n - 1) as f64
            }
        })
    }
}

/// Sampling box over `(s, dv, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleGrid {
    pub spacing: Axis,
    pub relative_speed: Axis,
    pub speed: Axis,
}

impl SampleGrid {
    /// `s in [5, 100]`, `dv in [-5, 5]`, `v in [0, 30]`.
    pub fn standard() -> Self {
        Self {
            spacing: Axis::new(5.0, 100.0, 20),
            relative_speed: Axis::new(-5.0, 5.0, 21),
            speed: Axis::new(0.0, 30.0, 16),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RdcCondition {
    /// `d accel / d s >= 0`
    Spacing,
    /// `d accel / d dv >= 0`
    RelativeSpeed,
    /// `d accel / d v <= 0`
    Speed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdcViolation {
    pub condition: RdcCondition,
    pub input: CarFollowingInput,
    pub derivative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdcReport {
    pub samples: usize,
    pub first_violation: Option<RdcViolation>,
}

impl RdcReport {
    pub fn passed(&self) -> bool {
        self.first_violation.is_none()
    }
}

/// Checks the rational driving constraints by central finite differences
/// (one-sided at `v = 0`).
pub fn rdc_check(model: &ModelKind, grid: &SampleGrid) -> RdcReport {
    const TOL: f64 = 1e-9;
    let accel = |s: f64, dv: f64, v: f64| match model {
        ModelKind::Idm(p) => idm_accel_unchecked(CarFollowingInput::new(s, dv, v), p),
        ModelKind::Ovrv(p) => ovrv_accel_unchecked(CarFollowingInput::new(s, dv, v), p),
    };
    let mut samples = 0;
    for s in grid.spacing.points() {
        for dv in grid.relative_speed.points() {
            for v in grid.speed.points() {
                samples += 1;
                let hs = 1e-6 * s.abs().max(1.0);
                let hdv = 1e-6 * dv.abs().max(1.0);
                let hv = 1e-6 * v.abs().max(1.0);
                let d_s = (accel(s + hs, dv, v) - accel(s - hs, dv, v)) / (2.0 * hs);
                let d_dv = (accel(s, dv + hdv, v) - accel(s, dv - hdv, v)) / (2.0 * hdv);
                let d_v = if v - hv < 0.0 {
                    (accel(s, dv, v + hv) - accel(s, dv, v)) / hv
                } else {
                    (accel(s, dv, v + hv) - accel(s, dv, v - hv)) / (2.0 * hv)
                };
                let input = CarFollowingInput::new(s, dv, v);
                let violation = if !(d_s >= -TOL) {
                    Some((RdcCondition::Spacing, d_s))
                } else if !(d_dv >= -TOL) {
                    Some((RdcCondition::RelativeSpeed, d_dv))
                } else if !(d_v <= TOL) {
                    Some((RdcCondition::Speed, d_v))
                } else {
                    None
                };
                if let Some((condition, derivative)) = violation {
                    return RdcReport {
                        samples,
                        first_violation: Some(RdcViolation {
                            condition,
                            input,
                            derivative,
                        }),
                    };
                }
            }
        }
    }
    RdcReport {
        samples,
        first_violation: None,
    }
}
