//! Additive feedback controllers for automated vehicles.
//!
//! The smoothing controller adds `u = beta * sigma(gamma * s * dv)` to the AV's
//! base acceleration, where `sigma` is a bounded odd sigmoid (arctan by
//! default). The AV then tracks the virtual speed `v_prev + u`, a damped copy
//! of its predecessor's speed. A baseline controller that needs the
//! equilibrium speed `v*` is provided for comparison.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::dynamics::Axis;
use crate::error::{ensure_finite, Error, Result};

/// Control parameters `theta = [beta, gamma]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    /// Output scale, m/s².
    pub beta: f64,
    /// Input gain, 1/(m·m/s).
    pub gamma: f64,
}

impl ControllerParams {
    pub fn new(beta: f64, gamma: f64) -> Self {
        Self { beta, gamma }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("beta", self.beta)?;
        ensure_finite("gamma", self.gamma)?;
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Domain(format!(
                "controller parameters must be non-negative, got beta={} gamma={}",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.beta, self.gamma]
    }
}

/// Bounded odd sigmoid used inside the smoothing controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sigmoid {
    #[default]
    Arctan,
    Tanh,
}

impl Sigmoid {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Sigmoid::Arctan => x.atan(),
            Sigmoid::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Sigmoid::Arctan => 1.0 / (1.0 + x * x),
            Sigmoid::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// `sup |sigma|`.
    pub fn bound(self) -> f64 {
        match self {
            Sigmoid::Arctan => FRAC_PI_2,
            Sigmoid::Tanh => 1.0,
        }
    }
}

/// The smoothing controller with a chosen sigmoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingLaw {
    pub params: ControllerParams,
    pub sigmoid: Sigmoid,
}

impl SmoothingLaw {
    pub fn arctan(params: ControllerParams) -> Self {
        Self {
            params,
            sigmoid: Sigmoid::Arctan,
        }
    }

    #[inline]
    pub fn input(&self, spacing: f64, relative_speed: f64) -> f64 {
        self.params.beta
            * self
                .sigmoid
                .value(self.params.gamma * spacing * relative_speed)
    }

    /// `sup |u| = beta * sup |sigma|`.
    pub fn alpha(&self) -> f64 {
        self.params.beta * self.sigmoid.bound()
    }

    /// Partials of `u` with respect to `(beta, gamma)` and to `dv`.
    #[inline]
    pub fn gradients(&self, spacing: f64, relative_speed: f64) -> SmoothingGradients {
        let x = self.params.gamma * spacing * relative_speed;
        let slope = self.sigmoid.derivative(x);
        SmoothingGradients {
            d_beta: self.sigmoid.value(x),
            d_gamma: self.params.beta * spacing * relative_speed * slope,
            d_relative_speed: self.params.beta * self.params.gamma * spacing * slope,
            d_spacing: self.params.beta * self.params.gamma * relative_speed * slope,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingGradients {
    pub d_beta: f64,
    pub d_gamma: f64,
    pub d_relative_speed: f64,
    pub d_spacing: f64,
}

/// `u = beta * arctan(gamma * s * dv)`.
pub fn additive_input(spacing: f64, relative_speed: f64, p: &ControllerParams) -> Result<f64> {
    ensure_finite("spacing", spacing)?;
    ensure_finite("relative speed", relative_speed)?;
    if spacing <= 0.0 {
        return Err(Error::Domain(format!("spacing must be positive, got {spacing}")));
    }
    Ok(SmoothingLaw::arctan(*p).input(spacing, relative_speed))
}

/// Speed profile the controlled AV converges to: `v_prev + u`.
pub fn virtual_speed(
    prev_speed: f64,
    spacing: f64,
    relative_speed: f64,
    p: &ControllerParams,
) -> Result<f64> {
    ensure_finite("preceding speed", prev_speed)?;
    Ok(prev_speed + additive_input(spacing, relative_speed, p)?)
}

/// Largest `beta` keeping the AV's worst-case virtual spacing above the
/// minimum safe spacing over the horizon: `2 (s(0) - s_min) / (pi t_f)`.
pub fn beta_upper_bound(initial_spacing: f64, min_safe_spacing: f64, horizon: f64) -> Result<f64> {
    ensure_finite("initial spacing", initial_spacing)?;
    ensure_finite("minimum safe spacing", min_safe_spacing)?;
    ensure_finite("horizon", horizon)?;
    if horizon <= 0.0 {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    if min_safe_spacing <= 0.0 {
        return Err(Error::Domain(format!(
            "minimum safe spacing must be positive, got {min_safe_spacing}"
        )));
    }
    if initial_spacing < min_safe_spacing {
        return Err(Error::Domain(format!(
            "initial spacing {initial_spacing} is below the minimum safe spacing {min_safe_spacing}"
        )));
    }
    Ok(2.0 * (initial_spacing - min_safe_spacing) / (std::f64::consts::PI * horizon))
}

/// Safety envelope for one controlled AV over `[0, t_f]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyEnvelope {
    pub initial_spacing: f64,
    pub min_safe_spacing: f64,
    pub horizon: f64,
    /// Supremum of the additive input, `beta * pi / 2` for arctan.
    pub alpha: f64,
}

impl SafetyEnvelope {
    /// Envelope for an arctan controller with the given `beta`.
    pub fn new(initial_spacing: f64, min_safe_spacing: f64, horizon: f64, beta: f64) -> Result<Self> {
        let bound = beta_upper_bound(initial_spacing, min_safe_spacing, horizon)?;
        if beta < 0.0 || beta > bound * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "beta {beta} outside the safe range [0, {bound}]"
            )));
        }
        Ok(Self {
            initial_spacing,
            min_safe_spacing,
            horizon,
            alpha: beta * FRAC_PI_2,
        })
    }

    /// Envelope with `beta` at its upper bound.
    pub fn at_bound(initial_spacing: f64, min_safe_spacing: f64, horizon: f64) -> Result<Self> {
        let beta = beta_upper_bound(initial_spacing, min_safe_spacing, horizon)?;
        Self::new(initial_spacing, min_safe_spacing, horizon, beta)
    }

    pub fn beta_max(&self) -> f64 {
        2.0 * (self.initial_spacing - self.min_safe_spacing) / (std::f64::consts::PI * self.horizon)
    }

    /// Lower bound on the virtual spacing, `s(0) - alpha t_f`.
    pub fn worst_case_spacing(&self) -> f64 {
        self.initial_spacing - self.alpha * self.horizon
    }

    pub fn holds(&self) -> bool {
        self.worst_case_spacing() >= self.min_safe_spacing * (1.0 - 1e-12)
    }
}

/// Parameters of the equilibrium-speed baseline controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsTrcParams {
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
    /// Equilibrium traffic speed, m/s.
    pub v_star: f64,
}

impl TsTrcParams {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("phi1", self.phi1), ("phi2", self.phi2), ("phi3", self.phi3)] {
            ensure_finite(name, value)?;
            if value < 0.0 {
                return Err(Error::Domain(format!("{name} must be non-negative, got {value}")));
            }
        }
        ensure_finite("v_star", self.v_star)?;
        if self.v_star <= 0.0 {
            return Err(Error::Domain(format!("v_star must be positive, got {}", self.v_star)));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn input_unchecked(&self, spacing: f64, relative_speed: f64, prev_speed: f64) -> f64 {
        self.phi1
            * (relative_speed
                + self.phi2 * (self.phi3 * spacing * (self.v_star - prev_speed)).atan())
    }
}

/// `u = phi1 (dv + phi2 arctan(phi3 s (v* - v_prev)))`.
pub fn ts_trc_input(
    spacing: f64,
    relative_speed: f64,
    prev_speed: f64,
    p: &TsTrcParams,
) -> Result<f64> {
    ensure_finite("spacing", spacing)?;
    ensure_finite("relative speed", relative_speed)?;
    ensure_finite("preceding speed", prev_speed)?;
    if spacing <= 0.0 {
        return Err(Error::Domain(format!("spacing must be positive, got {spacing}")));
    }
    Ok(p.input_unchecked(spacing, relative_speed, prev_speed))
}

/// Sampling box over `(s, dv)` for controller checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerBox {
    pub spacing: Axis,
    pub relative_speed: Axis,
}

impl ControllerBox {
    pub fn standard() -> Self {
        Self {
            spacing: Axis::new(5.0, 100.0, 20),
            relative_speed: Axis::new(-5.0, 5.0, 21),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionOutcome {
    pub passed: bool,
    pub counterexample: Option<String>,
}

impl ConditionOutcome {
    fn pass() -> Self {
        Self {
            passed: true,
            counterexample: None,
        }
    }

    fn fail(msg: String) -> Self {
        Self {
            passed: false,
            counterexample: Some(msg),
        }
    }
}

/// Per-condition result of [`validate_controller_conditions`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    /// (i) increasing in `dv`, and in `s` along the direction that increases `s dv`.
    pub monotone: ConditionOutcome,
    /// (ii) `u dv > 0` for `dv != 0`, `u = 0` at `dv = 0`.
    pub sign: ConditionOutcome,
    /// (iii) bounded time derivatives along smooth trajectories.
    pub smooth: ConditionOutcome,
    /// (iv) `sup |u| <= alpha`.
    pub bounded: ConditionOutcome,
}

impl ConditionReport {
    pub fn all_passed(&self) -> bool {
        self.monotone.passed && self.sign.passed && self.smooth.passed && self.bounded.passed
    }
}

// Test trajectories (s_center, s_amplitude, dv_amplitude, omega) for the smoothness check.
const SMOOTH_PROBES: [(f64, f64, f64, f64); 4] = [
    (50.0, 20.0, 2.0, 0.5),
    (30.0, 10.0, 5.0, 0.2),
    (80.0, 5.0, 0.5, 1.0),
    (20.0, 15.0, 3.0, 0.05),
];

/// Numerically checks the four admissibility conditions of an additive
/// controller `ctrl(s, dv)` on a sampling box.
///
/// Condition (iii) cannot be decided from `(s, dv)` alone, so it is checked
/// along sinusoidal test trajectories: the sampled second time-difference of
/// `u` must stay bounded as the sampling step is halved.
pub fn validate_controller_conditions<F>(ctrl: F, region: &ControllerBox, alpha_claim: f64) -> ConditionReport
where
    F: Fn(f64, f64) -> f64,
{
    let spacings: Vec<f64> = region.spacing.points().collect();
    let speeds: Vec<f64> = region.relative_speed.points().collect();

    let mut monotone = ConditionOutcome::pass();
    'outer: for &dv in &speeds {
        if dv == 0.0 {
            continue;
        }
        for w in spacings.windows(2) {
            let (lo, hi) = (ctrl(w[0], dv), ctrl(w[1], dv));
            if !((hi - lo) * dv.signum() > 0.0) {
                monotone = ConditionOutcome::fail(format!(
                    "u not strictly increasing in s*dv between s={} and s={} at dv={dv}",
                    w[0], w[1]
                ));
                break 'outer;
            }
        }
    }
    if monotone.passed {
        'outer_dv: for &s in &spacings {
            for w in speeds.windows(2) {
                if !(ctrl(s, w[1]) > ctrl(s, w[0])) {
                    monotone = ConditionOutcome::fail(format!(
                        "u not strictly increasing in dv between dv={} and dv={} at s={s}",
                        w[0], w[1]
                    ));
                    break 'outer_dv;
                }
            }
        }
    }

    let mut sign = ConditionOutcome::pass();
    'sign: for &s in &spacings {
        for &dv in speeds.iter().chain(std::iter::once(&0.0)) {
            let u = ctrl(s, dv);
            let ok = if dv == 0.0 { u == 0.0 } else { u * dv > 0.0 };
            if !ok {
                sign = ConditionOutcome::fail(format!("u={u} at s={s}, dv={dv}"));
                break 'sign;
            }
        }
    }

    let mut smooth = ConditionOutcome::pass();
    for &(centre, amp, dv_amp, omega) in &SMOOTH_PROBES {
        let coarse = max_second_difference(&ctrl, centre, amp, dv_amp, omega, 0.01);
        let fine = max_second_difference(&ctrl, centre, amp, dv_amp, omega, 0.005);
        if !coarse.is_finite() || !fine.is_finite() || fine > 1.5 * coarse + 1e-9 {
            smooth = ConditionOutcome::fail(format!(
                "second time-difference grows under refinement ({coarse} -> {fine}) on probe s={centre}+{amp}sin({omega}t), dv={dv_amp}cos({omega}t)"
            ));
            break;
        }
    }

    let mut bounded = ConditionOutcome::pass();
    let extremes = [(1e6, 1e3), (1e6, -1e3), (1e3, 1e6), (1e3, -1e6)];
    let probes = spacings
        .iter()
        .flat_map(|&s| speeds.iter().map(move |&dv| (s, dv)))
        .chain(extremes);
    for (s, dv) in probes {
        let u = ctrl(s, dv);
        if !(u.abs() <= alpha_claim + 1e-12) {
            bounded = ConditionOutcome::fail(format!("|u|={} exceeds {alpha_claim} at s={s}, dv={dv}", u.abs()));
            break;
        }
    }

    ConditionReport {
        monotone,
        sign,
        smooth,
        bounded,
    }
}

fn max_second_difference<F>(ctrl: &F, centre: f64, amp: f64, dv_amp: f64, omega: f64, h: f64) -> f64
where
    F: Fn(f64, f64) -> f64,
{
    let duration = 4.0 * std::f64::consts::PI / omega;
    let n = (duration / h).ceil() as usize;
    let u: Vec<f64> = (0..=n)
        .map(|k| {
            let t = k as f64 * h;
            ctrl(centre + amp * (omega * t).sin(), dv_amp * (omega * t).cos())
        })
        .collect();
    u.windows(3)
        .map(|w| ((w[2] - 2.0 * w[1] + w[0]) / (h * h)).abs())
        .fold(0.0, f64::max)
}
