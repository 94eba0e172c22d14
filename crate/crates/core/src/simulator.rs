//! Platoon simulation: a kinematic leader followed by a string of human-driven
//! (IDM) and automated (OVRV plus additive control) vehicles.
//!
//! Vehicle 0 is the leader; followers are numbered `1..=n` front to back.

use serde::{Deserialize, Serialize};

use crate::controller::{beta_upper_bound, ControllerParams, Sigmoid, SmoothingLaw, TsTrcParams};
use crate::dynamics::{
    equilibrium_spacing, idm_accel_unchecked, ovrv_accel_unchecked, CarFollowingInput, IdmParams,
    ModelKind, OvrvParams,
};
use crate::error::{ensure_finite, Error, Result};
use crate::integrate::{self, Integrator, Workspace};

/// Piecewise-linear leader speed schedule, held constant after the last knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct LeadProfile {
    knots: Vec<[f64; 2]>,
}

impl TryFrom<Vec<[f64; 2]>> for LeadProfile {
    type Error = Error;

    fn try_from(knots: Vec<[f64; 2]>) -> Result<Self> {
        LeadProfile::new(knots)
    }
}

impl From<LeadProfile> for Vec<[f64; 2]> {
    fn from(p: LeadProfile) -> Self {
        p.knots
    }
}

impl LeadProfile {
    /// Knots are `[time s, speed m/s]`.
    pub fn new(knots: Vec<[f64; 2]>) -> Result<Self> {
        let first = knots
            .first()
            .ok_or_else(|| Error::Domain("lead profile needs at least one knot".into()))?;
        if first[0] != 0.0 {
            return Err(Error::Domain("lead profile must start at t = 0".into()));
        }
        for k in &knots {
            ensure_finite("lead knot time", k[0])?;
            ensure_finite("lead knot speed", k[1])?;
            if k[1] < 0.0 {
                return Err(Error::Domain(format!("lead speed {} is negative", k[1])));
            }
        }
        if knots.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return Err(Error::Domain("lead knot times must be strictly increasing".into()));
        }
        Ok(Self { knots })
    }

    pub fn constant(speed: f64) -> Self {
        Self {
            knots: vec![[0.0, speed]],
        }
    }

    /// Cruise at 21 m/s, brake to 18 m/s over 100-120 s, hold until 140 s,
    /// recover to 21 m/s by 160 s.
    pub fn stop_and_go() -> Self {
        Self {
            knots: vec![
                [0.0, 21.0],
                [100.0, 21.0],
                [120.0, 18.0],
                [140.0, 18.0],
                [160.0, 21.0],
            ],
        }
    }

    pub fn knots(&self) -> &[[f64; 2]] {
        &self.knots
    }

    pub fn initial_speed(&self) -> f64 {
        self.knots[0][1]
    }

    fn segment(&self, t: f64) -> Option<(&[f64; 2], &[f64; 2])> {
        let idx = self.knots.partition_point(|k| k[0] <= t);
        if idx == 0 || idx >= self.knots.len() {
            None
        } else {
            Some((&self.knots[idx - 1], &self.knots[idx]))
        }
    }

    /// Speed at `t`; constant before 0 and after the last knot.
    pub fn speed(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.knots[0][1];
        }
        match self.segment(t) {
            Some((a, b)) => a[1] + (b[1] - a[1]) * (t - a[0]) / (b[0] - a[0]),
            None => self.knots[self.knots.len() - 1][1],
        }
    }

    /// Right derivative of the speed at `t`.
    pub fn slope(&self, t: f64) -> f64 {
        match self.segment(t.max(0.0)) {
            Some((a, b)) => (b[1] - a[1]) / (b[0] - a[0]),
            None => 0.0,
        }
    }

    pub fn is_flat(&self) -> bool {
        self.knots.iter().all(|k| k[1] == self.knots[0][1])
    }
}

/// Leader speed at `t`, which must lie in `[0, t_f]`.
pub fn lead_speed(t: f64, profile: &LeadProfile, t_f: f64) -> Result<f64> {
    ensure_finite("time", t)?;
    if t < 0.0 || t > t_f {
        return Err(Error::Domain(format!("time {t} outside [0, {t_f}]")));
    }
    Ok(profile.speed(t))
}

/// Evenly spreads `round(mpr * n)` automated vehicles over followers `1..=n`.
///
/// The `k`-th AV sits at `floor(k (n + 1) / (m + 1))`, which puts a single AV
/// in the middle of the platoon.
pub fn place_avs(n: usize, mpr: f64) -> Vec<usize> {
    let mpr = mpr.clamp(0.0, 1.0);
    let m = ((mpr * n as f64).round() as usize).min(n);
    (1..=m).map(|k| k * (n + 1) / (m + 1)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    /// Smoothing controller with tuned parameters.
    #[default]
    TsOps,
    /// Equilibrium-speed baseline.
    TsTrc,
    None,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::TsOps => "ts-ops",
            ControllerKind::TsTrc => "ts-trc",
            ControllerKind::None => "none",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ts-ops" => Ok(ControllerKind::TsOps),
            "ts-trc" => Ok(ControllerKind::TsTrc),
            "none" => Ok(ControllerKind::None),
            other => Err(format!("unknown controller '{other}' (expected ts-ops, ts-trc or none)")),
        }
    }
}

/// Controller section of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub sigmoid: Sigmoid,
    pub beta: f64,
    pub gamma: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
    /// Equilibrium speed for the baseline; defaults to the lead's initial speed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_star: Option<f64>,
    /// AV spacing `s(0)` used for the `beta` ceiling; defaults to the AV's
    /// equilibrium spacing at the lead's initial speed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_spacing: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kind: ControllerKind::TsOps,
            sigmoid: Sigmoid::Arctan,
            beta: 0.0,
            gamma: 1.0,
            phi1: 1.0,
            phi2: 0.1,
            phi3: 0.01,
            v_star: None,
            bound_spacing: None,
        }
    }
}

impl ControllerConfig {
    pub fn params(&self) -> ControllerParams {
        ControllerParams::new(self.beta, self.gamma)
    }
}

/// Everything needed to run one platoon simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n_followers: usize,
    pub mpr: f64,
    pub hv_model: IdmParams,
    pub av_model: OvrvParams,
    pub controller: ControllerConfig,
    pub lead: LeadProfile,
    pub t_f: f64,
    pub dt: f64,
    pub integrator: Integrator,
    pub metric_window: (f64, f64),
    pub min_safe_spacing: f64,
    /// Per-follower initial spacing override (length `n_followers`).
    pub initial_spacing: Option<Vec<f64>>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_followers == 0 {
            return Err(Error::Domain("platoon needs at least one follower".into()));
        }
        ensure_finite("mpr", self.mpr)?;
        if !(0.0..=1.0).contains(&self.mpr) {
            return Err(Error::Domain(format!("mpr {} outside [0, 1]", self.mpr)));
        }
        self.hv_model.validate()?;
        self.av_model.validate()?;
        ensure_finite("t_f", self.t_f)?;
        ensure_finite("dt", self.dt)?;
        if self.dt <= 0.0 || self.t_f <= 0.0 {
            return Err(Error::Domain("dt and t_f must be positive".into()));
        }
        let (t1, t2) = self.metric_window;
        if !(0.0 <= t1 && t1 < t2 && t2 <= self.t_f) {
            return Err(Error::Domain(format!(
                "metric window ({t1}, {t2}) must satisfy 0 <= t1 < t2 <= t_f = {}",
                self.t_f
            )));
        }
        ensure_finite("min_safe_spacing", self.min_safe_spacing)?;
        if self.min_safe_spacing <= 0.0 {
            return Err(Error::Domain("min_safe_spacing must be positive".into()));
        }
        if let Some(init) = &self.initial_spacing {
            if init.len() != self.n_followers {
                return Err(Error::Domain(format!(
                    "initial_spacing has {} entries, expected {}",
                    init.len(),
                    self.n_followers
                )));
            }
            if init.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::Domain("initial spacings must be positive".into()));
            }
        }
        match self.controller.kind {
            ControllerKind::TsOps => self.controller.params().validate()?,
            ControllerKind::TsTrc => self.ts_trc_params().validate()?,
            ControllerKind::None => {}
        }
        Ok(())
    }

    /// 1-based follower indices of the automated vehicles.
    pub fn av_indices(&self) -> Vec<usize> {
        place_avs(self.n_followers, self.mpr)
    }

    /// Desired speed for the baseline controller and for ASV.
    pub fn v_star(&self) -> f64 {
        self.controller.v_star.unwrap_or_else(|| self.lead.initial_speed())
    }

    pub fn ts_trc_params(&self) -> TsTrcParams {
        TsTrcParams {
            phi1: self.controller.phi1,
            phi2: self.controller.phi2,
            phi3: self.controller.phi3,
            v_star: self.v_star(),
        }
    }

    /// Initial AV spacing used for the `beta` ceiling.
    pub fn bound_spacing(&self) -> Result<f64> {
        match self.controller.bound_spacing {
            Some(s) => Ok(s),
            None => equilibrium_spacing(&ModelKind::Ovrv(self.av_model), self.lead.initial_speed()),
        }
    }

    pub fn beta_max(&self) -> Result<f64> {
        beta_upper_bound(self.bound_spacing()?, self.min_safe_spacing, self.t_f)
    }

    pub fn with_mpr(&self, mpr: f64) -> Scenario {
        Scenario {
            mpr,
            ..self.clone()
        }
    }

    pub fn with_controller(&self, kind: ControllerKind) -> Scenario {
        let mut s = self.clone();
        s.controller.kind = kind;
        s
    }

    pub fn with_params(&self, theta: ControllerParams) -> Scenario {
        let mut s = self.clone();
        s.controller.beta = theta.beta;
        s.controller.gamma = theta.gamma;
        s
    }

    fn model_of(&self, kind: VehicleKind) -> ModelKind {
        match kind {
            VehicleKind::Automated => ModelKind::Ovrv(self.av_model),
            _ => ModelKind::Idm(self.hv_model),
        }
    }

    pub fn vehicle_kinds(&self) -> Vec<VehicleKind> {
        let avs = self.av_indices();
        let mut kinds = vec![VehicleKind::Human; self.n_followers + 1];
        kinds[0] = VehicleKind::Leader;
        for i in avs {
            kinds[i] = VehicleKind::Automated;
        }
        kinds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleKind {
    Leader,
    Human,
    Automated,
}

impl VehicleKind {
    pub fn label(self) -> &'static str {
        match self {
            VehicleKind::Leader => "lead",
            VehicleKind::Human => "HV",
            VehicleKind::Automated => "AV",
        }
    }
}

/// Positions and speeds of every vehicle, leader first.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatoonState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub kinds: Vec<VehicleKind>,
    pub lengths: Vec<f64>,
}

impl PlatoonState {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// `x_{i-1} - x_i - l_{i-1}` for follower `i`.
    pub fn spacing(&self, i: usize) -> f64 {
        self.x[i - 1] - self.x[i] - self.lengths[i - 1]
    }

    pub fn is_ordered(&self) -> bool {
        (1..self.len()).all(|i| self.spacing(i) > 0.0)
    }
}

/// Recorded series for one vehicle. The leader's `s`, `dv` are NaN.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VehicleSeries {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub s: Vec<f64>,
    pub dv: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub kinds: Vec<VehicleKind>,
    pub vehicles: Vec<VehicleSeries>,
    /// Number of (step, vehicle) events where the zero-speed floor was applied.
    pub speed_floor_hits: usize,
}

impl Trajectory {
    pub fn n_vehicles(&self) -> usize {
        self.vehicles.len()
    }

    pub fn av_indices(&self) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == VehicleKind::Automated)
            .map(|(i, _)| i)
            .collect()
    }

    /// Writes `t,vehicle,kind,x,v,a,s,dv,u` rows with six decimals.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,vehicle,kind,x,v,a,s,dv,u")?;
        for (k, t) in self.times.iter().enumerate() {
            for (i, series) in self.vehicles.iter().enumerate() {
                let opt = |x: f64| if x.is_nan() { String::new() } else { format!("{x:.6}") };
                writeln!(
                    out,
                    "{t:.6},{i},{},{:.6},{:.6},{:.6},{},{},{:.6}",
                    self.kinds[i].label(),
                    series.x[k],
                    series.v[k],
                    series.a[k],
                    opt(series.s[k]),
                    opt(series.dv[k]),
                    series.u[k],
                )?;
            }
        }
        Ok(())
    }
}

/// Which parameter sensitivities to co-integrate with the platoon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitivityMode {
    #[default]
    None,
    /// Per-AV speed sensitivity with spacing and predecessor speed held exogenous.
    Reduced,
    /// Full forward sensitivity of every position and speed (shared parameters).
    Coupled,
}

/// Co-integrated sensitivity series.
#[derive(Debug, Clone, PartialEq)]
pub enum SensitivityTrace {
    /// `z[j][k]` for the `j`-th AV (in `av_indices` order) at sample `k`.
    Reduced {
        av_indices: Vec<usize>,
        z: Vec<Vec<[f64; 2]>>,
    },
    /// `dv_i/dtheta` for every vehicle at every sample.
    Coupled { speed: Vec<Vec<[f64; 2]>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub trajectory: Trajectory,
    pub sensitivity: Option<SensitivityTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Control {
    None,
    Smoothing(SmoothingLaw),
    TsTrc(TsTrcParams),
}

#[derive(Debug, Clone, Copy)]
struct Terms {
    spacing: f64,
    relative_speed: f64,
    accel: f64,
    input: f64,
}

/// Configurable platoon integrator.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    scenario: &'a Scenario,
    kinds: Vec<VehicleKind>,
    models: Vec<ModelKind>,
    controls: Vec<Control>,
    sensitivity: SensitivityMode,
    integrator: Integrator,
    dt: f64,
}

impl<'a> Simulator<'a> {
    pub fn new(scenario: &'a Scenario) -> Result<Self> {
        scenario.validate()?;
        let kinds = scenario.vehicle_kinds();
        let models = kinds.iter().map(|k| scenario.model_of(*k)).collect();
        let control = match scenario.controller.kind {
            ControllerKind::None => Control::None,
            ControllerKind::TsOps => Control::Smoothing(SmoothingLaw {
                params: scenario.controller.params(),
                sigmoid: scenario.controller.sigmoid,
            }),
            ControllerKind::TsTrc => Control::TsTrc(scenario.ts_trc_params()),
        };
        let controls = kinds
            .iter()
            .map(|k| if *k == VehicleKind::Automated { control } else { Control::None })
            .collect();
        Ok(Self {
            scenario,
            kinds,
            models,
            controls,
            sensitivity: SensitivityMode::None,
            integrator: scenario.integrator,
            dt: scenario.dt,
        })
    }

    /// Gives each AV its own smoothing parameters, in `av_indices` order.
    pub fn with_av_params(mut self, params: &[ControllerParams]) -> Result<Self> {
        let avs = self.scenario.av_indices();
        if params.len() != avs.len() {
            return Err(Error::Domain(format!(
                "expected {} AV parameter sets, got {}",
                avs.len(),
                params.len()
            )));
        }
        for (i, p) in avs.iter().zip(params) {
            p.validate()?;
            self.controls[*i] = Control::Smoothing(SmoothingLaw {
                params: *p,
                sigmoid: self.scenario.controller.sigmoid,
            });
        }
        Ok(self)
    }

    pub fn with_sensitivity(mut self, mode: SensitivityMode) -> Self {
        self.sensitivity = mode;
        self
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn kinds(&self) -> &[VehicleKind] {
        &self.kinds
    }

    /// Every follower at its own equilibrium spacing (or the override) behind
    /// its predecessor, all at the lead's initial speed.
    pub fn initial_state(&self) -> Result<PlatoonState> {
        let n = self.kinds.len();
        let v0 = self.scenario.lead.initial_speed();
        let lengths: Vec<f64> = self.models.iter().map(|m| m.length()).collect();
        let mut x = vec![0.0; n];
        for i in 1..n {
            let s = match &self.scenario.initial_spacing {
                Some(init) => init[i - 1],
                None => equilibrium_spacing(&self.models[i], v0)?,
            };
            x[i] = x[i - 1] - lengths[i - 1] - s;
        }
        Ok(PlatoonState {
            x,
            v: vec![v0; n],
            kinds: self.kinds.clone(),
            lengths,
        })
    }

    #[inline]
    fn terms(&self, i: usize, t: f64, x: &[f64], v: &[f64], lengths: &[f64]) -> Result<Terms> {
        let spacing = x[i - 1] - x[i] - lengths[i - 1];
        let prev_speed = v[i - 1];
        let speed = v[i].max(0.0);
        let relative_speed = prev_speed - speed;
        if !(spacing > 0.0) {
            return Err(Error::NumericalBlowup {
                vehicle: i,
                time: t,
                reason: format!("non-positive spacing {spacing}"),
            });
        }
        let input = CarFollowingInput::new(spacing, relative_speed, speed);
        let base = match &self.models[i] {
            ModelKind::Idm(p) => idm_accel_unchecked(input, p),
            ModelKind::Ovrv(p) => ovrv_accel_unchecked(input, p),
        };
        let u = match &self.controls[i] {
            Control::None => 0.0,
            Control::Smoothing(law) => law.input(spacing, relative_speed),
            Control::TsTrc(p) => p.input_unchecked(spacing, relative_speed, prev_speed),
        };
        let accel = base + u;
        if !accel.is_finite() {
            return Err(Error::NumericalBlowup {
                vehicle: i,
                time: t,
                reason: format!("non-finite acceleration {accel}"),
            });
        }
        Ok(Terms {
            spacing,
            relative_speed,
            accel,
            input: u,
        })
    }

    /// Layout of the augmented state: `[x (n), v (n), sensitivities...]`.
    fn sensitivity_dim(&self, n_av: usize) -> usize {
        match self.sensitivity {
            SensitivityMode::None => 0,
            SensitivityMode::Reduced => 2 * n_av,
            // (dx/dbeta, dx/dgamma, dv/dbeta, dv/dgamma) per vehicle
            SensitivityMode::Coupled => 4 * self.kinds.len(),
        }
    }

    fn derivative(
        &self,
        t: f64,
        y: &[f64],
        dy: &mut [f64],
        lengths: &[f64],
        avs: &[usize],
        v_buf: &mut Vec<f64>,
    ) -> Result<()> {
        let n = self.kinds.len();
        let lead = &self.scenario.lead;
        let (x, rest) = y.split_at(n);
        let (v_state, sens) = rest.split_at(n);
        v_buf.clear();
        v_buf.extend_from_slice(v_state);
        v_buf[0] = lead.speed(t);
        let v = &v_buf[..];
        let (dx, drest) = dy.split_at_mut(n);
        let (dvel, dsens) = drest.split_at_mut(n);
        dx[0] = v[0];
        dvel[0] = lead.slope(t);
        for i in 1..n {
            let terms = self.terms(i, t, x, v, lengths)?;
            dx[i] = v[i];
            dvel[i] = terms.accel;
        }
        match self.sensitivity {
            SensitivityMode::None => {}
            SensitivityMode::Reduced => {
                for (j, &i) in avs.iter().enumerate() {
                    let law = match self.controls[i] {
                        Control::Smoothing(law) => law,
                        _ => unreachable!("checked in run"),
                    };
                    let spacing = x[i - 1] - x[i] - lengths[i - 1];
                    let relative_speed = v[i - 1] - v[i].max(0.0);
                    let g = law.gradients(spacing, relative_speed);
                    let p = &self.scenario.av_model;
                    let dr_dv = -p.k1 * p.tau - p.k2 - g.d_relative_speed;
                    dsens[2 * j] = dr_dv * sens[2 * j] + g.d_beta;
                    dsens[2 * j + 1] = dr_dv * sens[2 * j + 1] + g.d_gamma;
                }
            }
            SensitivityMode::Coupled => {
                // sens[4i..4i+2] = dx_i/dtheta, sens[4i+2..4i+4] = dv_i/dtheta
                dsens[0..4].fill(0.0);
                for i in 1..n {
                    let spacing = x[i - 1] - x[i] - lengths[i - 1];
                    let speed = v[i].max(0.0);
                    let relative_speed = v[i - 1] - speed;
                    let partials = self.models[i]
                        .partials(CarFollowingInput::new(spacing, relative_speed, speed));
                    let (mut a_s, mut a_dv) = (partials.d_spacing, partials.d_relative_speed);
                    let mut forcing = [0.0; 2];
                    if let Control::Smoothing(law) = self.controls[i] {
                        let g = law.gradients(spacing, relative_speed);
                        a_s += g.d_spacing;
                        a_dv += g.d_relative_speed;
                        forcing = [g.d_beta, g.d_gamma];
                    }
                    for c in 0..2 {
                        let sx_prev = sens[4 * (i - 1) + c];
                        let sv_prev = sens[4 * (i - 1) + 2 + c];
                        let sx = sens[4 * i + c];
                        let sv = sens[4 * i + 2 + c];
                        dsens[4 * i + c] = sv;
                        dsens[4 * i + 2 + c] = a_s * (sx_prev - sx)
                            + a_dv * (sv_prev - sv)
                            + partials.d_speed * sv
                            + forcing[c];
                    }
                }
            }
        }
        Ok(())
    }

    /// Advances a plain state by one step of length `dt`.
    pub fn step(&self, state: &PlatoonState, t: f64) -> Result<PlatoonState> {
        let n = state.len();
        if n != self.kinds.len() {
            return Err(Error::Domain("state does not match the scenario".into()));
        }
        let mut y = Vec::with_capacity(2 * n);
        y.extend_from_slice(&state.x);
        y.extend_from_slice(&state.v);
        let mut ws = Workspace::new(2 * n);
        let mut v_buf = Vec::with_capacity(n);
        let no_sens = Simulator {
            sensitivity: SensitivityMode::None,
            ..self.clone()
        };
        let mut f = |t: f64, y: &[f64], dy: &mut [f64]| {
            no_sens.derivative(t, y, dy, &state.lengths, &[], &mut v_buf)
        };
        integrate::step(self.integrator, &mut f, t, &mut y, self.dt, &mut ws)?;
        let mut next = state.clone();
        next.x.copy_from_slice(&y[..n]);
        next.v.copy_from_slice(&y[n..2 * n]);
        next.v[0] = self.scenario.lead.speed(t + self.dt);
        for v in next.v.iter_mut().skip(1) {
            *v = v.max(0.0);
        }
        Ok(next)
    }

    pub fn run(&self) -> Result<SimulationOutput> {
        let avs = self.scenario.av_indices();
        if self.sensitivity != SensitivityMode::None {
            if avs.is_empty() {
                return Err(Error::Domain("sensitivities need at least one AV".into()));
            }
            if avs.iter().any(|i| !matches!(self.controls[*i], Control::Smoothing(_))) {
                return Err(Error::Domain(
                    "sensitivities are defined for the smoothing controller only".into(),
                ));
            }
            if self.sensitivity == SensitivityMode::Coupled {
                let first = self.controls[avs[0]];
                if avs.iter().any(|i| self.controls[*i] != first) {
                    return Err(Error::Domain(
                        "coupled sensitivities require shared AV parameters".into(),
                    ));
                }
            }
        }
        let state = self.initial_state()?;
        let n = state.len();
        let lengths = state.lengths.clone();
        let sdim = self.sensitivity_dim(avs.len());
        let mut y = vec![0.0; 2 * n + sdim];
        y[..n].copy_from_slice(&state.x);
        y[n..2 * n].copy_from_slice(&state.v);

        let steps = self.n_steps();
        let mut traj = Trajectory {
            times: Vec::with_capacity(steps + 1),
            kinds: self.kinds.clone(),
            vehicles: vec![VehicleSeries::default(); n],
            speed_floor_hits: 0,
        };
        for series in traj.vehicles.iter_mut() {
            for buf in [
                &mut series.x,
                &mut series.v,
                &mut series.a,
                &mut series.s,
                &mut series.dv,
                &mut series.u,
            ] {
                buf.reserve(steps + 1);
            }
        }
        let mut sens_trace = match self.sensitivity {
            SensitivityMode::None => None,
            SensitivityMode::Reduced => Some(SensitivityTrace::Reduced {
                av_indices: avs.clone(),
                z: vec![Vec::with_capacity(steps + 1); avs.len()],
            }),
            SensitivityMode::Coupled => Some(SensitivityTrace::Coupled {
                speed: vec![Vec::with_capacity(steps + 1); n],
            }),
        };

        let mut ws = Workspace::new(y.len());
        let mut v_buf = Vec::with_capacity(n);
        let mut t = 0.0;
        self.record(&mut traj, sens_trace.as_mut(), t, &y, &lengths)?;
        for k in 0..steps {
            let h = (self.scenario.t_f - t).min(self.dt);
            let mut f = |t: f64, y: &[f64], dy: &mut [f64]| {
                self.derivative(t, y, dy, &lengths, &avs, &mut v_buf)
            };
            integrate::step(self.integrator, &mut f, t, &mut y, h, &mut ws)?;
            t = if k + 1 == steps {
                self.scenario.t_f
            } else {
                (k + 1) as f64 * self.dt
            };
            y[n] = self.scenario.lead.speed(t);
            for v in y[n + 1..2 * n].iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                    traj.speed_floor_hits += 1;
                }
            }
            if let Some(i) = y.iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericalBlowup {
                    vehicle: if i < 2 * n { i % n } else { 0 },
                    time: t,
                    reason: "non-finite state".into(),
                });
            }
            self.record(&mut traj, sens_trace.as_mut(), t, &y, &lengths)?;
        }
        Ok(SimulationOutput {
            trajectory: traj,
            sensitivity: sens_trace,
        })
    }

    fn n_steps(&self) -> usize {
        let n = self.scenario.t_f / self.dt;
        let rounded = n.round();
        if (n - rounded).abs() <= 1e-9 * n.max(1.0) {
            rounded as usize
        } else {
            n.ceil() as usize
        }
    }

    fn record(
        &self,
        traj: &mut Trajectory,
        sens: Option<&mut SensitivityTrace>,
        t: f64,
        y: &[f64],
        lengths: &[f64],
    ) -> Result<()> {
        let n = self.kinds.len();
        let x = &y[..n];
        let v = &y[n..2 * n];
        traj.times.push(t);
        let lead = &mut traj.vehicles[0];
        lead.x.push(x[0]);
        lead.v.push(v[0]);
        lead.a.push(self.scenario.lead.slope(t));
        lead.s.push(f64::NAN);
        lead.dv.push(f64::NAN);
        lead.u.push(0.0);
        for i in 1..n {
            let terms = self.terms(i, t, x, v, lengths)?;
            let series = &mut traj.vehicles[i];
            series.x.push(x[i]);
            series.v.push(v[i]);
            series.a.push(terms.accel);
            series.s.push(terms.spacing);
            series.dv.push(terms.relative_speed);
            series.u.push(terms.input);
        }
        match sens {
            None => {}
            Some(SensitivityTrace::Reduced { z, .. }) => {
                for (j, series) in z.iter_mut().enumerate() {
                    series.push([y[2 * n + 2 * j], y[2 * n + 2 * j + 1]]);
                }
            }
            Some(SensitivityTrace::Coupled { speed }) => {
                for (i, series) in speed.iter_mut().enumerate() {
                    series.push([y[2 * n + 4 * i + 2], y[2 * n + 4 * i + 3]]);
                }
            }
        }
        Ok(())
    }
}

/// Advances the platoon one `scenario.dt` step from time `t`.
pub fn step(state: &PlatoonState, t: f64, scenario: &Scenario) -> Result<PlatoonState> {
    Simulator::new(scenario)?.step(state, t)
}

/// Integrates the scenario from its equilibrium start to `t_f`.
pub fn simulate(scenario: &Scenario) -> Result<Trajectory> {
    Ok(Simulator::new(scenario)?.run()?.trajectory)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyViolation {
    pub vehicle: usize,
    pub time: f64,
    pub spacing: f64,
}

/// Every `(vehicle, time)` sample whose spacing is below `min_safe`.
pub fn check_safety(traj: &Trajectory, min_safe: f64) -> Vec<SafetyViolation> {
    let mut out = Vec::new();
    for (i, series) in traj.vehicles.iter().enumerate().skip(1) {
        for (k, &s) in series.s.iter().enumerate() {
            if s < min_safe {
                out.push(SafetyViolation {
                    vehicle: i,
                    time: traj.times[k],
                    spacing: s,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn scenario_one(mpr: f64) -> Scenario {
        Scenario {
            n_followers: 10,
            mpr,
            hv_model: IdmParams::SCENARIO_I,
            av_model: OvrvParams::DEFAULT,
            controller: ControllerConfig {
                beta: 0.0642,
                gamma: 1.0011,
                ..ControllerConfig::default()
            },
            lead: LeadProfile::stop_and_go(),
            t_f: 500.0,
            dt: 0.1,
            integrator: Integrator::Rk4,
            metric_window: (100.0, 250.0),
            min_safe_spacing: 2.0,
            initial_spacing: None,
        }
    }

    #[test]
    fn lead_profile_examples() {
        let p = LeadProfile::stop_and_go();
        assert_eq!(lead_speed(50.0, &p, 500.0).unwrap(), 21.0);
        assert_abs_diff_eq!(lead_speed(110.0, &p, 500.0).unwrap(), 19.5, epsilon = 1e-12);
        assert_eq!(lead_speed(140.0, &p, 500.0).unwrap(), 18.0);
        assert_eq!(lead_speed(400.0, &p, 500.0).unwrap(), 21.0);
        assert!(lead_speed(501.0, &p, 500.0).is_err());
        assert!(lead_speed(-1.0, &p, 500.0).is_err());
        assert_abs_diff_eq!(p.slope(110.0), -0.15, epsilon = 1e-12);
        assert_eq!(p.slope(130.0), 0.0);
    }

    #[test]
    fn lead_profile_rejects_bad_knots() {
        assert!(LeadProfile::new(vec![]).is_err());
        assert!(LeadProfile::new(vec![[1.0, 20.0]]).is_err());
        assert!(LeadProfile::new(vec![[0.0, 20.0], [0.0, 21.0]]).is_err());
        assert!(LeadProfile::new(vec![[0.0, -1.0]]).is_err());
    }

    #[test]
    fn av_placement() {
        assert!(place_avs(10, 0.0).is_empty());
        assert_eq!(place_avs(10, 0.1), vec![5]);
        assert_eq!(place_avs(10, 1.0), (1..=10).collect::<Vec<_>>());
        assert_eq!(place_avs(10, 0.5), vec![1, 3, 5, 7, 9]);
        for m in 0..=10 {
            let idx = place_avs(10, m as f64 / 10.0);
            assert_eq!(idx.len(), m);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(idx.iter().all(|i| (1..=10).contains(i)));
        }
    }

    #[test]
    fn equilibrium_is_fixed_point_per_step() {
        let mut sc = scenario_one(0.5);
        sc.lead = LeadProfile::constant(21.0);
        let sim = Simulator::new(&sc).unwrap();
        let s0 = sim.initial_state().unwrap();
        let s1 = sim.step(&s0, 0.0).unwrap();
        for i in 0..s0.len() {
            assert_abs_diff_eq!(s1.v[i], s0.v[i], epsilon = 1e-9);
            assert_abs_diff_eq!(s1.x[i] - s0.x[i], 21.0 * 0.1, epsilon = 1e-9);
        }
    }

    #[test]
    fn euler_step_matches_hand_computation() {
        let mut sc = scenario_one(1.0);
        sc.n_followers = 1;
        sc.integrator = Integrator::Euler;
        sc.lead = LeadProfile::constant(20.0);
        let sim = Simulator::new(&sc).unwrap();
        let state = PlatoonState {
            x: vec![100.0, 40.0],
            v: vec![20.0, 19.0],
            kinds: vec![VehicleKind::Leader, VehicleKind::Automated],
            lengths: vec![5.0, 5.0],
        };
        let next = sim.step(&state, 0.0).unwrap();
        // s = 55, dv = 1, v = 19
        let h = 0.02 * (55.0 - 21.51 - 1.71 * 19.0) + 0.13 * 1.0;
        let u = 0.0642 * (1.0011f64 * 55.0).atan();
        assert_abs_diff_eq!(next.v[1], 19.0 + 0.1 * (h + u), epsilon = 1e-12);
        assert_abs_diff_eq!(next.x[1], 40.0 + 0.1 * 19.0, epsilon = 1e-12);
        assert_abs_diff_eq!(next.x[0], 102.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_beta_equals_no_controller() {
        let a = scenario_one(0.5).with_params(ControllerParams::new(0.0, 1.0));
        let b = scenario_one(0.5).with_controller(ControllerKind::None);
        let ta = simulate(&a).unwrap();
        let tb = simulate(&b).unwrap();
        for i in 0..ta.n_vehicles() {
            assert!(ta.vehicles[i].v == tb.vehicles[i].v);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let sc = scenario_one(0.3);
        let (a, b) = (simulate(&sc).unwrap(), simulate(&sc).unwrap());
        let bits = |t: &Trajectory| -> Vec<u64> {
            t.vehicles
                .iter()
                .flat_map(|s| [&s.x, &s.v, &s.a, &s.s, &s.dv, &s.u])
                .flat_map(|series| series.iter().map(|x| x.to_bits()))
                .collect()
        };
        assert!(bits(&a) == bits(&b));
        assert_eq!(a.times, b.times);
    }

    #[test]
    fn flat_lead_keeps_everything_constant() {
        for mpr in [0.0, 0.5, 1.0] {
            let mut sc = scenario_one(mpr);
            sc.lead = LeadProfile::constant(21.0);
            let traj = simulate(&sc).unwrap();
            for series in &traj.vehicles {
                let dev = series.v.iter().map(|v| (v - 21.0).abs()).fold(0.0, f64::max);
                assert!(dev < 1e-6, "deviation {dev}");
                for (u, dv) in series.u.iter().zip(&series.dv) {
                    assert!(u.abs() < 1e-9);
                    if *dv == 0.0 {
                        assert_eq!(*u, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn safety_check_flags_overlap() {
        let mut traj = simulate(&scenario_one(0.0)).unwrap();
        assert!(check_safety(&traj, 2.0).is_empty());
        traj.vehicles[3].s[7] = -1.0;
        traj.vehicles[4].s[9] = 1.5;
        let v = check_safety(&traj, 2.0);
        assert_eq!(v.len(), 2);
        assert_eq!((v[0].vehicle, v[0].time), (3, traj.times[7]));
        assert_eq!((v[1].vehicle, v[1].time), (4, traj.times[9]));
    }

    #[test]
    fn collision_is_reported_with_vehicle() {
        let mut sc = scenario_one(1.0);
        sc.initial_spacing = Some(vec![0.5; 10]);
        sc.lead = LeadProfile::new(vec![[0.0, 21.0], [1.0, 0.0]]).unwrap();
        match simulate(&sc) {
            Err(Error::NumericalBlowup { vehicle, .. }) => assert!(vehicle >= 1),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let mut sc = scenario_one(0.1);
        sc.n_followers = 2;
        sc.mpr = 0.5;
        sc.t_f = 0.2;
        sc.metric_window = (0.0, 0.2);
        let traj = simulate(&sc).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,vehicle,kind,x,v,a,s,dv,u");
        assert_eq!(lines.len(), 1 + 3 * 3);
        assert!(lines[1].starts_with("0.000000,0,lead,0.000000,21.000000,0.000000,,,0.000000"));
        assert!(lines[2].contains(",1,AV,"));
    }
}
