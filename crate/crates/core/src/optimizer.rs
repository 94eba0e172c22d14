//! Gradient-based selection of the smoothing parameters `theta = [beta, gamma]`.
//!
//! Each iteration simulates the platoon with the current `theta`, integrates
//! the AV speed sensitivities `z = dv_i/dtheta` alongside it (starting from
//! zero), forms the descent direction `lambda = integral z (v_i - v_{i-1}) dt`
//! and takes a projected step `theta <- P(theta - eps * lambda)` onto
//! `0 <= beta <= beta_max`, `gamma >= 0`. It stops once the objective changes
//! by no more than `phi` between iterations, or after `n_max` simulations.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::controller::{ControllerParams, SmoothingLaw};
use crate::dynamics::OvrvParams;
use crate::error::{ensure_finite, Error, Result};
use crate::metrics::window_integral;
use crate::simulator::{ControllerKind, Scenario, SensitivityMode, SensitivityTrace, Simulator, Trajectory};

/// Sensitivities of one AV's speed to `beta` and `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SensitivityState {
    pub z_beta: f64,
    pub z_gamma: f64,
}

impl SensitivityState {
    pub fn as_array(&self) -> [f64; 2] {
        [self.z_beta, self.z_gamma]
    }
}

/// Local state of one AV: spacing, relative speed and own speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvState {
    pub spacing: f64,
    pub relative_speed: f64,
    pub speed: f64,
}

/// `z' = (dr/dv) z + dr/dtheta` for `r = OVRV + beta arctan(gamma s dv)`,
/// with `s` and the predecessor speed treated as exogenous.
pub fn sensitivity_rhs(
    z: SensitivityState,
    state: AvState,
    theta: &ControllerParams,
    av_model: &OvrvParams,
) -> Result<SensitivityState> {
    ensure_finite("z_beta", z.z_beta)?;
    ensure_finite("z_gamma", z.z_gamma)?;
    ensure_finite("spacing", state.spacing)?;
    ensure_finite("relative speed", state.relative_speed)?;
    ensure_finite("speed", state.speed)?;
    if state.spacing <= 0.0 {
        return Err(Error::Domain(format!("spacing must be positive, got {}", state.spacing)));
    }
    let g = SmoothingLaw::arctan(*theta).gradients(state.spacing, state.relative_speed);
    let dr_dv = -av_model.k1 * av_model.tau - av_model.k2 - g.d_relative_speed;
    Ok(SensitivityState {
        z_beta: dr_dv * z.z_beta + g.d_beta,
        z_gamma: dr_dv * z.z_gamma + g.d_gamma,
    })
}

fn check_av(traj: &Trajectory, av: usize) -> Result<()> {
    if av == 0 || av >= traj.n_vehicles() {
        return Err(Error::Domain(format!("vehicle {av} is not a follower")));
    }
    Ok(())
}

fn gap_series(traj: &Trajectory, av: usize) -> Vec<f64> {
    traj.vehicles[av]
        .v
        .iter()
        .zip(&traj.vehicles[av - 1].v)
        .map(|(v, prev)| v - prev)
        .collect()
}

fn full_span(traj: &Trajectory) -> (f64, f64) {
    (
        *traj.times.first().unwrap_or(&0.0),
        *traj.times.last().unwrap_or(&0.0),
    )
}

/// `J = 1/2 sum_i integral (v_i - v_{i-1})^2 dt` over the controlled AVs.
pub fn objective_j(traj: &Trajectory, av_indices: &[usize]) -> Result<f64> {
    if av_indices.is_empty() {
        return Err(Error::Domain("objective needs at least one AV".into()));
    }
    let (t0, tf) = full_span(traj);
    let mut total = 0.0;
    for &i in av_indices {
        check_av(traj, i)?;
        let sq: Vec<f64> = gap_series(traj, i).iter().map(|g| g * g).collect();
        total += 0.5 * window_integral(&traj.times, &sq, t0, tf);
    }
    Ok(total)
}

/// `lambda = integral z(t) (v_i - v_{i-1}) dt` for one AV.
pub fn descent_direction(traj: &Trajectory, z: &[[f64; 2]], av: usize) -> Result<[f64; 2]> {
    check_av(traj, av)?;
    if z.len() != traj.times.len() {
        return Err(Error::Domain(format!(
            "sensitivity series has {} samples, trajectory has {}",
            z.len(),
            traj.times.len()
        )));
    }
    let gap = gap_series(traj, av);
    let (t0, tf) = full_span(traj);
    let mut out = [0.0; 2];
    for (c, slot) in out.iter_mut().enumerate() {
        let integrand: Vec<f64> = z.iter().zip(&gap).map(|(zk, g)| zk[c] * g).collect();
        *slot = window_integral(&traj.times, &integrand, t0, tf);
    }
    Ok(out)
}

/// Clamps `beta` into `[0, beta_max]` and `gamma` into `[0, inf)`.
pub fn project_feasible(theta: ControllerParams, beta_max: f64) -> ControllerParams {
    ControllerParams {
        beta: theta.beta.clamp(0.0, beta_max.max(0.0)),
        gamma: theta.gamma.max(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitivityKind {
    /// Per-AV speed sensitivity with spacing and predecessor speed exogenous.
    #[default]
    Reduced,
    /// Full platoon forward sensitivity; gives the exact gradient of `J`.
    Coupled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub theta0: ControllerParams,
    /// Fixed step size in `(0, 1)`.
    pub epsilon: f64,
    /// Convergence threshold on `|J_k - J_{k-1}|`.
    pub phi: f64,
    pub n_max: usize,
    pub beta_max: f64,
    /// Separate parameters per AV instead of one shared set.
    pub per_av: bool,
    pub sensitivity: SensitivityKind,
}

impl OptimizerConfig {
    pub fn new(theta0: ControllerParams, beta_max: f64) -> Self {
        Self {
            theta0,
            epsilon: 1e-5,
            phi: 1e-6,
            n_max: 300,
            beta_max,
            per_av: false,
            sensitivity: SensitivityKind::Reduced,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.theta0.validate()?;
        ensure_finite("epsilon", self.epsilon)?;
        ensure_finite("phi", self.phi)?;
        ensure_finite("beta_max", self.beta_max)?;
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Domain(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if self.phi <= 0.0 {
            return Err(Error::Domain("phi must be positive".into()));
        }
        if self.n_max == 0 {
            return Err(Error::Domain("n_max must be at least 1".into()));
        }
        if self.beta_max <= 0.0 {
            return Err(Error::Domain("beta_max must be positive".into()));
        }
        if self.per_av && self.sensitivity == SensitivityKind::Coupled {
            return Err(Error::Domain("coupled sensitivities need shared parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// One entry in shared mode, one per AV otherwise.
    pub theta: Vec<ControllerParams>,
    pub j: f64,
    pub lambda: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    Stationary,
    MaxIterations,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::Stationary => "stationary",
            Termination::MaxIterations => "max-iterations",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizationTrace {
    pub records: Vec<IterationRecord>,
    pub termination: Option<Termination>,
}

impl OptimizationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn objective(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.j).collect()
    }

    /// Shared mode: `iter,beta,gamma,J,lambda_beta,lambda_gamma`.
    /// Per-AV mode adds an `av` column after `iter`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        let per_av = self.records.first().is_some_and(|r| r.theta.len() > 1);
        if per_av {
            writeln!(out, "iter,av,beta,gamma,J,lambda_beta,lambda_gamma")?;
        } else {
            writeln!(out, "iter,beta,gamma,J,lambda_beta,lambda_gamma")?;
        }
        for r in &self.records {
            for (j, (theta, lambda)) in r.theta.iter().zip(&r.lambda).enumerate() {
                if per_av {
                    write!(out, "{},{},", r.iter, j)?;
                } else {
                    write!(out, "{},", r.iter)?;
                }
                writeln!(
                    out,
                    "{:.9},{:.9},{:.9},{:.9},{:.9}",
                    theta.beta, theta.gamma, r.j, lambda[0], lambda[1]
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    /// Best-objective parameters; the first AV's set in per-AV mode.
    pub theta: ControllerParams,
    pub per_av: Vec<ControllerParams>,
    pub best_j: f64,
    pub trace: OptimizationTrace,
}

/// Failure partway through tuning, with the iterations completed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeError {
    pub source: Error,
    pub trace: OptimizationTrace,
}

impl fmt::Display for OptimizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tuning failed after {} iterations: {}", self.trace.len(), self.source)
    }
}

impl std::error::Error for OptimizeError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl From<Error> for OptimizeError {
    fn from(source: Error) -> Self {
        Self {
            source,
            trace: OptimizationTrace::default(),
        }
    }
}

/// Objective, per-AV objective and per-AV descent directions at one `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub j: f64,
    pub j_per_av: Vec<f64>,
    pub lambda_per_av: Vec<[f64; 2]>,
    pub trajectory: Trajectory,
}

impl Evaluation {
    pub fn lambda_total(&self) -> [f64; 2] {
        self.lambda_per_av
            .iter()
            .fold([0.0, 0.0], |acc, l| [acc[0] + l[0], acc[1] + l[1]])
    }
}

/// Simulates with the given per-AV parameters and returns `J` and `lambda`.
pub fn evaluate(scenario: &Scenario, params: &[ControllerParams], kind: SensitivityKind) -> Result<Evaluation> {
    let mode = match kind {
        SensitivityKind::Reduced => SensitivityMode::Reduced,
        SensitivityKind::Coupled => SensitivityMode::Coupled,
    };
    let output = Simulator::new(scenario)?
        .with_av_params(params)?
        .with_sensitivity(mode)
        .run()?;
    let traj = output.trajectory;
    let avs = scenario.av_indices();
    let j_per_av = avs
        .iter()
        .map(|&i| objective_j(&traj, &[i]))
        .collect::<Result<Vec<_>>>()?;
    let lambda_per_av = match output.sensitivity {
        Some(SensitivityTrace::Reduced { z, .. }) => avs
            .iter()
            .zip(&z)
            .map(|(&i, zi)| descent_direction(&traj, zi, i))
            .collect::<Result<Vec<_>>>()?,
        Some(SensitivityTrace::Coupled { speed }) => avs
            .iter()
            .map(|&i| {
                let dgap: Vec<[f64; 2]> = speed[i]
                    .iter()
                    .zip(&speed[i - 1])
                    .map(|(a, b)| [a[0] - b[0], a[1] - b[1]])
                    .collect();
                descent_direction(&traj, &dgap, i)
            })
            .collect::<Result<Vec<_>>>()?,
        None => unreachable!("sensitivity requested"),
    };
    Ok(Evaluation {
        j: j_per_av.iter().sum(),
        j_per_av,
        lambda_per_av,
        trajectory: traj,
    })
}

/// Runs the projected fixed-step descent and returns the best-`J` parameters.
pub fn optimize(scenario: &Scenario, cfg: &OptimizerConfig) -> std::result::Result<TuneResult, OptimizeError> {
    cfg.validate()?;
    if scenario.controller.kind != ControllerKind::TsOps {
        return Err(Error::Domain("only the smoothing controller can be tuned".into()).into());
    }
    let n_av = scenario.av_indices().len();
    if n_av == 0 {
        return Err(Error::Domain("no AV to tune".into()).into());
    }
    let groups = if cfg.per_av { n_av } else { 1 };
    let start = project_feasible(cfg.theta0, cfg.beta_max);
    let mut theta = vec![start; groups];
    let mut trace = OptimizationTrace::default();
    let mut best: Option<(f64, Vec<ControllerParams>)> = None;

    for iter in 1..=cfg.n_max {
        let params: Vec<ControllerParams> = if cfg.per_av {
            theta.clone()
        } else {
            vec![theta[0]; n_av]
        };
        let eval = match evaluate(scenario, &params, cfg.sensitivity) {
            Ok(e) => e,
            Err(source) => return Err(OptimizeError { source, trace }),
        };
        let lambda = if cfg.per_av {
            eval.lambda_per_av.clone()
        } else {
            vec![eval.lambda_total()]
        };
        if best.as_ref().is_none_or(|(j, _)| eval.j < *j) {
            best = Some((eval.j, theta.clone()));
        }
        let prev_j = trace.records.last().map(|r| r.j);
        trace.records.push(IterationRecord {
            iter,
            theta: theta.clone(),
            j: eval.j,
            lambda: lambda.clone(),
        });
        if let Some(prev) = prev_j {
            if (eval.j - prev).abs() <= cfg.phi {
                trace.termination = Some(Termination::Converged);
                break;
            }
        }
        let next: Vec<ControllerParams> = theta
            .iter()
            .zip(&lambda)
            .map(|(th, l)| {
                project_feasible(
                    ControllerParams::new(th.beta - cfg.epsilon * l[0], th.gamma - cfg.epsilon * l[1]),
                    cfg.beta_max,
                )
            })
            .collect();
        // A projected step that cannot move theta marks a stationary point.
        if next == theta {
            trace.termination = Some(Termination::Stationary);
            break;
        }
        theta = next;
    }
    if trace.termination.is_none() {
        trace.termination = Some(Termination::MaxIterations);
    }
    let (best_j, best_theta) = best.expect("at least one iteration ran");
    let per_av = if cfg.per_av {
        best_theta.clone()
    } else {
        vec![best_theta[0]; n_av]
    };
    Ok(TuneResult {
        theta: best_theta[0],
        per_av,
        best_j,
        trace,
    })
}
